use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SceneGenError;

pub type ClassId = u32;

/// Relationship between the source and target label sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Identical label sets.
    ClosedSet,
    /// Target labels are a strict subset of source labels.
    PartialSet,
    /// Both domains own private classes.
    OpenSet,
}

/// Source/target label sets with their derived common and private partitions
/// and the Jaccard overlap `xi = |C_s ∩ C_t| / |C_s ∪ C_t|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpaceConfig {
    pub universe: Vec<ClassId>,
    pub source: Vec<ClassId>,
    pub target: Vec<ClassId>,
    pub common: Vec<ClassId>,
    pub source_private: Vec<ClassId>,
    pub target_private: Vec<ClassId>,
    pub xi: f64,
}

impl LabelSpaceConfig {
    /// Recompute xi from the stored sets (invariant check helper).
    pub fn recomputed_xi(&self) -> f64 {
        let mut union = self.source.clone();
        for c in &self.target {
            if !union.contains(c) {
                union.push(*c);
            }
        }
        let inter = self
            .source
            .iter()
            .filter(|c| self.target.contains(c))
            .count();
        inter as f64 / union.len() as f64
    }

    pub fn is_common(&self, class_id: ClassId) -> bool {
        self.common.contains(&class_id)
    }

    pub fn is_source_class(&self, class_id: ClassId) -> bool {
        self.source.contains(&class_id)
    }
}

fn sorted(mut v: Vec<ClassId>) -> Vec<ClassId> {
    v.sort_unstable();
    v
}

/// Integer count that `xi * universe_size` must hit exactly, or None.
fn exact_count(xi: f64, universe: usize) -> Option<usize> {
    let raw = xi * universe as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 && rounded >= 0.0 {
        Some(rounded as usize)
    } else {
        None
    }
}

/// Build label sets for a scenario with an exact target Jaccard overlap.
///
/// The union of `C_s` and `C_t` is always the full universe (matching how the
/// class splits are laid out for each benchmark scenario); membership of the
/// common and private partitions is shuffled by `seed`.
pub fn build_label_spaces(
    universe_size: usize,
    scenario: Scenario,
    target_xi: f64,
    seed: u64,
) -> Result<LabelSpaceConfig, SceneGenError> {
    if universe_size < 4 {
        return Err(SceneGenError::UniverseTooSmall(universe_size));
    }
    let universe: Vec<ClassId> = (0..universe_size as ClassId).collect();
    let mut shuffled = universe.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    match scenario {
        Scenario::ClosedSet => {
            if (target_xi - 1.0).abs() > 1e-9 {
                return Err(SceneGenError::UnachievableXi {
                    requested: target_xi,
                    universe: universe_size,
                    achievable: vec![1.0],
                });
            }
            Ok(LabelSpaceConfig {
                universe: universe.clone(),
                source: universe.clone(),
                target: universe.clone(),
                common: universe,
                source_private: vec![],
                target_private: vec![],
                xi: 1.0,
            })
        }
        Scenario::PartialSet => {
            // C_s is the whole universe; xi = |C_t| / |C_s|.
            let achievable: Vec<f64> = (1..universe_size)
                .map(|t| t as f64 / universe_size as f64)
                .collect();
            let t = match exact_count(target_xi, universe_size) {
                Some(t) if t >= 1 && t < universe_size => t,
                _ => {
                    return Err(SceneGenError::UnachievableXi {
                        requested: target_xi,
                        universe: universe_size,
                        achievable,
                    })
                }
            };
            let target = sorted(shuffled[..t].to_vec());
            Ok(LabelSpaceConfig {
                universe: universe.clone(),
                source: universe.clone(),
                common: target.clone(),
                source_private: sorted(shuffled[t..].to_vec()),
                target_private: vec![],
                target,
                xi: t as f64 / universe_size as f64,
            })
        }
        Scenario::OpenSet => {
            // Both private sets non-empty: the non-common classes are split
            // between the domains, the larger half to the target.
            let achievable: Vec<f64> = (1..=universe_size.saturating_sub(2))
                .map(|c| c as f64 / universe_size as f64)
                .collect();
            let c = match exact_count(target_xi, universe_size) {
                Some(c) if c >= 1 && c + 2 <= universe_size => c,
                _ => {
                    return Err(SceneGenError::UnachievableXi {
                        requested: target_xi,
                        universe: universe_size,
                        achievable,
                    })
                }
            };
            let private = universe_size - c;
            let src_private_n = private / 2;
            let common = sorted(shuffled[..c].to_vec());
            let source_private = sorted(shuffled[c..c + src_private_n].to_vec());
            let target_private = sorted(shuffled[c + src_private_n..].to_vec());
            let mut source = common.clone();
            source.extend(&source_private);
            let mut target = common.clone();
            target.extend(&target_private);
            Ok(LabelSpaceConfig {
                universe,
                source: sorted(source),
                target: sorted(target),
                common,
                source_private,
                target_private,
                xi: c as f64 / universe_size as f64,
            })
        }
    }
}
