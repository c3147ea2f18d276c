//! Held-out object sets: shapes with physical parameters, posed per trial.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{yaw_rotation, Pose};
use crate::object::{ObjectKind, ObjectSpec};
use crate::ppo::RandomizationRanges;

pub const OBJECT_SET_FORMAT_VERSION: u32 = 1;

/// Kinds used for the non-cuboid share, in rotation.
const NON_CUBOIDS: [ObjectKind; 3] = [ObjectKind::Cylinder, ObjectKind::Cone, ObjectKind::Sphere];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: usize,
    /// Object at the origin; trials move it.
    pub spec: ObjectSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSet {
    pub format_version: u32,
    pub seed: u64,
    /// Fraction of non-cuboid objects.
    pub object_mix: f64,
    pub ranges: RandomizationRanges,
    pub objects: Vec<ObjectEntry>,
}

/// `n` objects of which round(n·mix) are non-cuboid, shuffled by `seed`.
pub fn generate_object_set(n: usize, object_mix: f64, ranges: &RandomizationRanges, seed: u64) -> Result<ObjectSet> {
    if n == 0 {
        return Err(Error::input("object set needs at least one object"));
    }
    if !(0.0..=1.0).contains(&object_mix) {
        return Err(Error::input(format!("object mix must lie in [0, 1], got {object_mix}")));
    }
    ranges.validate()?;
    let non = (n as f64 * object_mix).round() as usize;
    let mut kinds: Vec<ObjectKind> = (0..n)
        .map(|i| if i < non { NON_CUBOIDS[i % NON_CUBOIDS.len()] } else { ObjectKind::Cuboid })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kinds.shuffle(&mut rng);
    let centered = RandomizationRanges {
        position_xy: [0.0, 0.0],
        yaw_deg: [0.0, 0.0],
        ..ranges.clone()
    };
    let objects = kinds
        .into_iter()
        .enumerate()
        .map(|(id, kind)| ObjectEntry {
            id,
            spec: centered.sample_object(kind, &mut rng),
        })
        .collect();
    Ok(ObjectSet {
        format_version: OBJECT_SET_FORMAT_VERSION,
        seed,
        object_mix,
        ranges: ranges.clone(),
        objects,
    })
}

/// Same object at a random planar pose on the ground plane.
pub fn place_object<R: Rng + ?Sized>(spec: &ObjectSpec, position_xy: [f64; 2], yaw_deg: [f64; 2], rng: &mut R) -> ObjectSpec {
    let draw = |r: [f64; 2], rng: &mut R| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
    let x = draw(position_xy, rng);
    let y = draw(position_xy, rng);
    let yaw = draw(yaw_deg, rng).to_radians();
    let z = spec.shape().half_extents().z;
    ObjectSpec {
        pose: Pose::new(nalgebra::Vector3::new(x, y, z), yaw_rotation(yaw)),
        ..spec.clone()
    }
}

impl ObjectSet {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != OBJECT_SET_FORMAT_VERSION {
            return Err(Error::Load(format!(
                "object set format_version {} is not supported (expected {OBJECT_SET_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.objects.is_empty() {
            return Err(Error::Load("object set is empty".into()));
        }
        for o in &self.objects {
            o.spec.validate()?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let set: ObjectSet = serde_json::from_str(&text).map_err(|e| Error::Load(format!("object set: {e}")))?;
        set.validate()?;
        Ok(set)
    }

    pub fn count(&self, kind: ObjectKind) -> usize {
        self.objects.iter().filter(|o| o.spec.kind == kind).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn even_count_splits_exactly() {
        let set = generate_object_set(100, 0.5, &RandomizationRanges::default(), 3).unwrap();
        assert_eq!(set.count(ObjectKind::Cuboid), 50);
        let non: usize = NON_CUBOIDS.iter().map(|&k| set.count(k)).sum();
        assert_eq!(non, 50);
        assert!(NON_CUBOIDS.iter().all(|&k| set.count(k) >= 16));
    }

    #[test]
    fn round_trips_through_json() {
        let set = generate_object_set(7, 0.5, &RandomizationRanges::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("objects.json");
        set.save(&p).unwrap();
        assert_eq!(ObjectSet::load(&p).unwrap(), set);
    }

    #[test]
    fn rejects_bad_mix() {
        assert!(generate_object_set(10, 1.5, &RandomizationRanges::default(), 0).is_err());
        assert!(generate_object_set(0, 0.5, &RandomizationRanges::default(), 0).is_err());
    }

    proptest! {
        #[test]
        fn placement_rests_on_ground_within_ranges(seed in 0u64..500) {
            let set = generate_object_set(4, 0.5, &RandomizationRanges::default(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for o in &set.objects {
                let s = place_object(&o.spec, [-0.04, 0.04], [-30.0, 30.0], &mut rng);
                prop_assert!((s.pose.position.z - s.shape().half_extents().z).abs() < 1e-12);
                prop_assert!(s.pose.position.x.abs() <= 0.04 && s.pose.position.y.abs() <= 0.04);
                let yaw = s.pose.rotation().euler_angles().2.to_degrees();
                prop_assert!(yaw.abs() <= 30.0 + 1e-9);
            }
        }
    }
}
