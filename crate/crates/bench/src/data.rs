//! Per-seed dataset construction.

use std::path::Path;

use cbm_core::data::{
    generate_linear_gaussian, generate_nonlinear_concepts, generate_species_task, load_csv, load_manifest, save_csv,
    save_manifest, Dataset, Manifest, NonlinearConfig, ShiftConfig, Split,
};
use cbm_core::numerics::RandomSource;
use cbm_core::theory::LinearSetting;

use crate::config::DataSource;
use crate::Result;

const SHIFT_TEST_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SeedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub shifted_test: Option<Dataset>,
}

pub fn materialize(source: &DataSource, seed: u64) -> Result<SeedData> {
    let mut rng = RandomSource::new(seed);
    Ok(match source {
        DataSource::LinearGaussian {
            d,
            k,
            sigma_x,
            sigma_c,
            sigma_y,
            n_train,
            n_val,
            n_test,
        } => {
            let s = LinearSetting::random(*d, *k, *sigma_x, *sigma_c, *sigma_y, &mut rng)?;
            SeedData {
                train: generate_linear_gaussian(&s, *n_train, &mut rng)?,
                val: generate_linear_gaussian(&s, *n_val, &mut rng)?.with_split(Split::Val),
                test: generate_linear_gaussian(&s, *n_test, &mut rng)?.with_split(Split::Test),
                shifted_test: None,
            }
        }
        DataSource::Species {
            task,
            n_train_per_class,
            n_val_per_class,
            n_test_per_class,
        } => {
            let task = ShiftConfig {
                mapping_seed: task.mapping_seed.wrapping_add(seed),
                ..task.clone()
            };
            let test_rng = || RandomSource::with_stream(seed, SHIFT_TEST_STREAM);
            SeedData {
                train: generate_species_task(&task, *n_train_per_class, false, &mut rng)?,
                val: generate_species_task(&task, *n_val_per_class, false, &mut rng)?.with_split(Split::Val),
                test: generate_species_task(&task, *n_test_per_class, false, &mut test_rng())?.with_split(Split::Test),
                shifted_test: Some(
                    generate_species_task(&task, *n_test_per_class, true, &mut test_rng())?.with_split(Split::Test),
                ),
            }
        }
        DataSource::Nonlinear {
            task,
            n_train,
            n_val,
            n_test,
        } => {
            let task = NonlinearConfig {
                mapping_seed: task.mapping_seed.wrapping_add(seed),
                ..task.clone()
            };
            SeedData {
                train: generate_nonlinear_concepts(&task, *n_train, &mut rng)?,
                val: generate_nonlinear_concepts(&task, *n_val, &mut rng)?.with_split(Split::Val),
                test: generate_nonlinear_concepts(&task, *n_test, &mut rng)?.with_split(Split::Test),
                shifted_test: None,
            }
        }
        DataSource::Csv {
            manifest,
            train,
            val,
            test,
            shifted_test,
        } => {
            let m = load_manifest(manifest)?;
            SeedData {
                train: load_csv(train, &m, Split::Train)?,
                val: load_csv(val, &m, Split::Val)?,
                test: load_csv(test, &m, Split::Test)?,
                shifted_test: shifted_test.as_ref().map(|p| load_csv(p, &m, Split::Test)).transpose()?,
            }
        }
    })
}

/// Writes `manifest.json` and one CSV per split into `dir`; returns the file names.
pub fn write_seed_data(data: &SeedData, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    save_manifest(&Manifest::for_dataset(&data.train), &dir.join("manifest.json"))?;
    let mut files = vec!["manifest.json".to_string()];
    let splits = [
        ("train.csv", Some(&data.train)),
        ("val.csv", Some(&data.val)),
        ("test.csv", Some(&data.test)),
        ("shifted_test.csv", data.shifted_test.as_ref()),
    ];
    for (name, ds) in splits {
        if let Some(ds) = ds {
            save_csv(ds, &dir.join(name))?;
            files.push(name.to_string());
        }
    }
    Ok(files)
}
