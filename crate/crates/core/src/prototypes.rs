//! Learnable class prototypes, one bank per taxonomy level.
//!
//! Each level owns a `classes x dim` matrix of free parameters, initialized
//! to random unit rows. Training reads two views per step: the base matrix
//! as stored, and a perturbed view where bounded uniform noise is added to
//! each row and the result is pulled back to the unit sphere. The noise is
//! a constant with respect to differentiation, so gradients flow through
//! the perturbed view into the base parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Tensor, NORM_EPSILON};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from};
use crate::taxonomy::Taxonomy;

/// When perturbation noise is redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    /// Fresh noise every training step.
    PerStep,
    /// One noise draw at bank creation, reused for every step.
    Static,
    /// No noise; the perturbed view degenerates to the normalized base.
    Off,
}

struct BankLevel {
    level: usize,
    num_classes: usize,
    param: ParamId,
}

/// Prototype matrices for a set of taxonomy levels, wired into a
/// [`ParamStore`].
pub struct PrototypeBank {
    levels: Vec<BankLevel>,
    dim: usize,
    epsilon: f64,
    mode: PerturbMode,
    static_noise: Option<Vec<Tensor>>,
}

/// Graph nodes for one level's prototypes inside a training step.
#[derive(Clone, Copy, Debug)]
pub struct LevelPrototypeNodes {
    pub level: usize,
    pub num_classes: usize,
    /// The raw parameter matrix.
    pub base: NodeId,
    /// `normalize(base + noise)`, differentiable through to `base`.
    pub perturbed: NodeId,
}

impl PrototypeBank {
    /// Create banks for `levels` (ascending, 1-based) of `taxonomy`. Rows
    /// initialize to seeded random unit vectors; every row is trainable.
    pub fn init(
        taxonomy: &Taxonomy,
        levels: &[usize],
        dim: usize,
        epsilon: f64,
        mode: PerturbMode,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("prototype dimension must be at least 1".into()));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(
                "perturbation epsilon must be finite and non-negative".into(),
            ));
        }
        if levels.is_empty() {
            return Err(Error::Config("prototype bank needs at least one level".into()));
        }
        for window in levels.windows(2) {
            if window[1] <= window[0] {
                return Err(Error::Config(
                    "prototype bank levels must be strictly ascending".into(),
                ));
            }
        }

        let mut bank_levels = Vec::with_capacity(levels.len());
        for &level in levels {
            let num_classes = taxonomy.classes_at(level)?;
            let mut rng = rng_from(derive_seed(seed, "prototype-init", level as u64));
            let mut data = vec![0.0; num_classes * dim];
            for row in 0..num_classes {
                let slice = &mut data[row * dim..(row + 1) * dim];
                loop {
                    for v in slice.iter_mut() {
                        *v = rng.sample(rand_distr::StandardNormal);
                    }
                    let norm: f64 = slice.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-9 {
                        for v in slice.iter_mut() {
                            *v /= norm;
                        }
                        break;
                    }
                }
            }
            let param = store.add(
                format!("prototypes/level{level}"),
                ParamGroup::Prototypes { level },
                Tensor::matrix(num_classes, dim, data)?,
                true,
            );
            bank_levels.push(BankLevel {
                level,
                num_classes,
                param,
            });
        }

        let mut bank = PrototypeBank {
            levels: bank_levels,
            dim,
            epsilon,
            mode,
            static_noise: None,
        };
        if mode == PerturbMode::Static {
            let noise = bank.draw_noise(store, derive_seed(seed, "perturb-static", 0))?;
            bank.static_noise = Some(noise);
        }
        Ok(bank)
    }

    /// Bank over every level of `taxonomy`.
    pub fn init_all_levels(
        taxonomy: &Taxonomy,
        dim: usize,
        epsilon: f64,
        mode: PerturbMode,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<Self> {
        let levels: Vec<usize> = (1..=taxonomy.num_levels()).collect();
        Self::init(taxonomy, &levels, dim, epsilon, mode, seed, store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mode(&self) -> PerturbMode {
        self.mode
    }

    /// Levels this bank covers, ascending.
    pub fn levels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.level).collect()
    }

    /// Parameter handle for one level's matrix.
    pub fn param_id(&self, level: usize) -> Result<ParamId> {
        self.find(level).map(|l| l.param)
    }

    /// Current base matrix of one level, as a copy.
    pub fn base_matrix(&self, store: &ParamStore, level: usize) -> Result<Tensor> {
        Ok(store.value(self.find(level)?.param).clone())
    }

    /// Noise tensors for one step, aligned with [`PrototypeBank::levels`].
    ///
    /// `per_step` mode draws fresh noise from `step_seed`; `static` returns
    /// the creation-time draw; `off` (or a zero epsilon) yields zero noise
    /// without consuming any randomness, so those configurations stay
    /// bit-identical to each other.
    pub fn noise_for_step(&self, store: &ParamStore, step_seed: u64) -> Result<Vec<Tensor>> {
        if self.epsilon == 0.0 || self.mode == PerturbMode::Off {
            return Ok(self
                .levels
                .iter()
                .map(|l| Tensor::zeros(&[l.num_classes, self.dim]))
                .collect());
        }
        match self.mode {
            PerturbMode::Static => Ok(self.static_noise.clone().expect("drawn at init")),
            PerturbMode::PerStep => self.draw_noise(store, step_seed),
            PerturbMode::Off => unreachable!("handled above"),
        }
    }

    fn draw_noise(&self, store: &ParamStore, seed: u64) -> Result<Vec<Tensor>> {
        let mut noise = Vec::with_capacity(self.levels.len());
        for bank_level in &self.levels {
            let base = store.value(bank_level.param);
            let mut rng = rng_from(derive_seed(seed, "perturb-level", bank_level.level as u64));
            let mut data = vec![0.0; bank_level.num_classes * self.dim];
            for row in 0..bank_level.num_classes {
                let slice = &mut data[row * self.dim..(row + 1) * self.dim];
                let base_row = base.row(row);
                let mut accepted = false;
                for _attempt in 0..8 {
                    for v in slice.iter_mut() {
                        *v = rng.random_range(-self.epsilon..=self.epsilon);
                    }
                    let norm: f64 = slice
                        .iter()
                        .zip(base_row)
                        .map(|(&d, &b)| (b + d) * (b + d))
                        .sum::<f64>()
                        .sqrt();
                    if norm > NORM_EPSILON {
                        accepted = true;
                        break;
                    }
                }
                if !accepted {
                    return Err(Error::DegenerateVector {
                        context: format!(
                            "perturbed prototype {row} at level {}",
                            bank_level.level
                        ),
                        norm: 0.0,
                        limit: NORM_EPSILON,
                    });
                }
            }
            noise.push(Tensor::matrix(bank_level.num_classes, self.dim, data)?);
        }
        Ok(noise)
    }

    /// Push base and perturbed prototype nodes for every level onto a step
    /// graph. `noise` must come from [`PrototypeBank::noise_for_step`]. When
    /// the bank draws no noise at all (zero epsilon or the off mode), the
    /// perturbed view aliases the base node, so those two configurations
    /// share one floating-point path and reproduce the stored parameters
    /// bit for bit.
    pub fn graph_nodes(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        noise: &[Tensor],
    ) -> Result<Vec<LevelPrototypeNodes>> {
        if noise.len() != self.levels.len() {
            return Err(Error::Config(format!(
                "expected noise for {} levels, got {}",
                self.levels.len(),
                noise.len()
            )));
        }
        let zero_noise = self.epsilon == 0.0 || self.mode == PerturbMode::Off;
        let mut nodes = Vec::with_capacity(self.levels.len());
        for (bank_level, level_noise) in self.levels.iter().zip(noise) {
            let base = graph.param(store, bank_level.param);
            let perturbed = if zero_noise {
                base
            } else {
                let noise_node = graph.constant(level_noise.clone());
                let shifted = graph.add(base, noise_node)?;
                graph.normalize_rows(shifted)?
            };
            nodes.push(LevelPrototypeNodes {
                level: bank_level.level,
                num_classes: bank_level.num_classes,
                base,
                perturbed,
            });
        }
        Ok(nodes)
    }

    fn find(&self, level: usize) -> Result<&BankLevel> {
        self.levels
            .iter()
            .find(|l| l.level == level)
            .ok_or_else(|| Error::Config(format!("prototype bank has no level {level}")))
    }
}
