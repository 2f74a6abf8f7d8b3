use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ontology::{fnv1a, ONTOLOGY};
use super::Scene;
use crate::GvqgError;

/// Recall and label-confusion noise of the oracle detector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    pub drop_prob: f64,
    pub confuse_prob: f64,
}

impl DetectorNoise {
    pub const NONE: DetectorNoise = DetectorNoise {
        drop_prob: 0.0,
        confuse_prob: 0.0,
    };

    pub fn new(drop_prob: f64, confuse_prob: f64) -> Result<Self, GvqgError> {
        let n = Self {
            drop_prob,
            confuse_prob,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<(), GvqgError> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(GvqgError::config("drop_prob", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.confuse_prob) {
            return Err(GvqgError::config("confuse_prob", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Detector output, zero-padded to `k_o` slots and ordered by box `x1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectDetection {
    /// One label per detected object (`len() <= k_o`).
    pub labels: Vec<String>,
    /// `k_o` rows of `d_f` features; rows past `labels.len()` are zero.
    pub features: Vec<Vec<f64>>,
    /// `k_o` normalized boxes; padding rows are zero.
    pub boxes: Vec<[f64; 4]>,
    /// Slot validity, `true` exactly for the first `labels.len()` slots.
    pub valid: Vec<bool>,
    /// Set when nothing survived detection.
    pub empty: bool,
}

impl ObjectDetection {
    pub fn k_o(&self) -> usize {
        self.valid.len()
    }

    pub fn num_detected(&self) -> usize {
        self.labels.len()
    }
}

/// Runs the oracle detector. Pure in `(scene, noise, seed)`.
pub fn detect_objects(scene: &Scene, noise: DetectorNoise, k_o: usize, seed: u64) -> ObjectDetection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(scene.scene_id.as_bytes()));
    let mut kept = Vec::new();
    for obj in &scene.objects {
        let dropped = noise.drop_prob > 0.0 && rng.random_bool(noise.drop_prob);
        let confused = noise.confuse_prob > 0.0 && rng.random_bool(noise.confuse_prob);
        if dropped {
            continue;
        }
        let label = if confused {
            let others: Vec<&str> = ONTOLOGY
                .iter()
                .map(|l| l.label)
                .filter(|l| *l != obj.label)
                .collect();
            others[rng.random_range(0..others.len())].to_string()
        } else {
            obj.label.clone()
        };
        kept.push((label, obj));
    }
    kept.sort_by(|a, b| {
        a.1.bbox[0]
            .total_cmp(&b.1.bbox[0])
            .then_with(|| a.0.cmp(&b.0))
    });
    kept.truncate(k_o);
    let d_f = scene.objects.first().map_or(0, |o| o.feature.len());
    let mut features = vec![vec![0.0; d_f]; k_o];
    let mut boxes = vec![[0.0; 4]; k_o];
    let mut valid = vec![false; k_o];
    let mut labels = Vec::with_capacity(kept.len());
    for (slot, (label, obj)) in kept.into_iter().enumerate() {
        features[slot] = obj.feature.clone();
        boxes[slot] = obj.bbox;
        valid[slot] = true;
        labels.push(label);
    }
    ObjectDetection {
        empty: labels.is_empty(),
        labels,
        features,
        boxes,
        valid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_dataset, WorldConfig};

    #[test]
    fn zero_noise_is_identity_sorted_by_x1() {
        let ds = generate_dataset(&WorldConfig { num_scenes: 50, ..Default::default() }, 2).unwrap();
        for s in &ds.scenes {
            let det = detect_objects(s, DetectorNoise::NONE, 8, 0);
            let mut objs: Vec<_> = s.objects.iter().collect();
            objs.sort_by(|a, b| a.bbox[0].total_cmp(&b.bbox[0]));
            let expect: Vec<String> = objs.iter().map(|o| o.label.clone()).collect();
            assert_eq!(det.labels, expect);
            assert_eq!(det.features.len(), 8);
            for (slot, o) in objs.iter().enumerate() {
                assert_eq!(det.boxes[slot], o.bbox);
                assert_eq!(det.features[slot], o.feature);
            }
            assert!(det.valid[det.labels.len()..].iter().all(|v| !v));
            assert!(det.features[det.labels.len()..].iter().all(|r| r.iter().all(|&v| v == 0.0)));
            assert!(det.boxes.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn drop_rate_matches_probability() {
        let ds = generate_dataset(&WorldConfig { num_scenes: 200, ..Default::default() }, 4).unwrap();
        let noise = DetectorNoise::new(0.5, 0.0).unwrap();
        let (mut kept, mut total) = (0usize, 0usize);
        let mut trial = 0u64;
        while total < 10_000 {
            for s in &ds.scenes {
                kept += detect_objects(s, noise, 8, trial).num_detected();
                total += s.objects.len();
            }
            trial += 1;
        }
        let frac = kept as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn full_drop_flags_empty() {
        let ds = generate_dataset(&WorldConfig { num_scenes: 5, ..Default::default() }, 4).unwrap();
        let det = detect_objects(&ds.scenes[0], DetectorNoise::new(1.0, 0.0).unwrap(), 8, 1);
        assert!(det.empty && det.labels.is_empty());
        assert!(DetectorNoise::new(1.5, 0.0).is_err());
    }
}
