//! On-disk phantom datasets.
//!
//! A dataset directory holds, per volume `phantom_NNN`:
//!
//! * `phantom_NNN.adxv`: the volume
//! * `phantom_NNN.toml`: the concrete phantom spec (centerline included)
//! * `phantom_NNN_gt.csv`: ground-truth planes (operator 0)
//! * `phantom_NNN_annotations.csv`: simulated operator planes

use std::fs;
use std::path::{Path, PathBuf};

use super::{
    generate, ground_truth_annotations, read_annotations, simulate_operator, write_annotations,
    Annotation, GroundTruth, OperatorNoise, PhantomRecipe, PhantomSpec,
};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::volume::{self, Volume};

const TAG_SPEC: u64 = 1;
const TAG_VOXELS: u64 = 2;
const TAG_OPERATOR: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub id: String,
    pub spec: PhantomSpec,
    pub volume: Volume,
    pub truth: GroundTruth,
    pub annotations: Vec<Annotation>,
}

impl PhantomCase {
    pub fn operators(&self) -> Vec<u32> {
        let mut ops: Vec<u32> = self.annotations.iter().map(|a| a.operator).collect();
        ops.sort_unstable();
        ops.dedup();
        ops
    }
}

pub fn case_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

/// Draws volume `index` of the dataset defined by `(recipe, seed)` and
/// annotates it with operators `1..=n_operators`.
pub fn generate_case(
    recipe: &PhantomRecipe,
    noise: &OperatorNoise,
    n_operators: u32,
    seed: u64,
    index: usize,
) -> Result<PhantomCase> {
    let spec = recipe.sample(&mut stream(seed, &[TAG_SPEC, index as u64]));
    generate_case_from_spec(spec, noise, n_operators, seed, index)
}

pub fn generate_case_from_spec(
    spec: PhantomSpec,
    noise: &OperatorNoise,
    n_operators: u32,
    seed: u64,
    index: usize,
) -> Result<PhantomCase> {
    let (volume, truth) = generate(&spec, &mut stream(seed, &[TAG_VOXELS, index as u64]))?;
    let mut annotations = Vec::new();
    for op in 1..=n_operators {
        let mut rng = stream(seed, &[TAG_OPERATOR, index as u64, op as u64]);
        annotations.extend(simulate_operator(&truth, noise, op, &mut rng)?);
    }
    Ok(PhantomCase {
        id: case_id(index),
        spec,
        volume,
        truth,
        annotations,
    })
}

fn paths(dir: &Path, id: &str) -> [PathBuf; 4] {
    [
        dir.join(format!("{id}.adxv")),
        dir.join(format!("{id}.toml")),
        dir.join(format!("{id}_gt.csv")),
        dir.join(format!("{id}_annotations.csv")),
    ]
}

pub fn write_case(dir: &Path, case: &PhantomCase) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [vol, spec, gt, ann] = paths(dir, &case.id);
    volume::save(&case.volume, vol)?;
    fs::write(spec, case.spec.to_toml()?)?;
    write_annotations(
        &ground_truth_annotations(&case.truth),
        fs::File::create(gt)?,
    )?;
    write_annotations(&case.annotations, fs::File::create(ann)?)?;
    Ok(())
}

pub fn read_case(dir: &Path, id: &str) -> Result<PhantomCase> {
    let [vol, spec, _, ann] = paths(dir, id);
    let volume = volume::load(&vol)?;
    let spec_text = fs::read_to_string(&spec)
        .map_err(|e| Error::NotFound(format!("{}: {e}", spec.display())))?;
    let spec = PhantomSpec::from_toml(&spec_text)?;
    let truth = GroundTruth::from_centerline(spec.validate()?)?;
    let annotations = if ann.exists() {
        read_annotations(fs::File::open(ann)?)?
    } else {
        Vec::new()
    };
    Ok(PhantomCase {
        id: id.to_string(),
        spec,
        volume,
        truth,
        annotations,
    })
}

/// Ids of all volumes in `dir`, sorted.
pub fn list_cases(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_suffix(".adxv") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<PhantomCase>> {
    let ids = list_cases(dir)?;
    if ids.is_empty() {
        return Err(Error::NotFound(format!("no volumes in {}", dir.display())));
    }
    ids.iter().map(|id| read_case(dir, id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_recipe() -> PhantomRecipe {
        PhantomRecipe {
            arch_radius_mm: [12.0, 14.0],
            ascending_mm: [8.0, 10.0],
            descending_mm: [8.0, 10.0],
            lumen_radius_mm: [3.0, 4.0],
            margin_mm: 2.0,
            spacing_mm: 1.0,
            ..PhantomRecipe::compact()
        }
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_case(&tiny_recipe(), &OperatorNoise::calibrated(), 3, 42, 1).unwrap();
        assert_eq!(case.annotations.len(), 33);
        assert_eq!(case.operators(), vec![1, 2, 3]);
        write_case(dir.path(), &case).unwrap();
        assert_eq!(
            list_cases(dir.path()).unwrap(),
            vec!["phantom_001".to_string()]
        );
        let back = read_case(dir.path(), "phantom_001").unwrap();
        assert_eq!(back.volume, case.volume);
        assert_eq!(back.spec, case.spec);
        assert_eq!(back.truth.landmarks.len(), 11);
        for (a, b) in back.truth.landmarks.iter().zip(&case.truth.landmarks) {
            assert!((a.pivot - b.pivot).norm() < 1e-9);
        }
        assert_eq!(back.annotations.len(), 33);
    }

    #[test]
    fn same_seed_same_case() {
        let a = generate_case(&tiny_recipe(), &OperatorNoise::calibrated(), 2, 7, 3).unwrap();
        let b = generate_case(&tiny_recipe(), &OperatorNoise::calibrated(), 2, 7, 3).unwrap();
        let c = generate_case(&tiny_recipe(), &OperatorNoise::calibrated(), 2, 7, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.spec, c.spec);
    }
}
