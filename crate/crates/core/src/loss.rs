//! Transducer alignment loss over a materialized log-probability lattice.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{contract, Error, Result};
use crate::nn::MASKED;
use crate::tensor::log_add_exp;

/// Largest `T + U` accepted by [`brute_force_loss`].
pub const BRUTE_FORCE_BOUND: usize = 12;

/// `log p(k | t, u)` for every frame `t < T`, prefix length `u <= U` and
/// output symbol `k` (the blank included). Row `t * (U + 1) + u` holds the
/// distribution at `(t, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogProbLattice {
    frames: usize,
    prefixes: usize,
    symbols: usize,
    blank: usize,
    data: Vec<f64>,
}

impl LogProbLattice {
    pub fn new(frames: usize, prefixes: usize, symbols: usize, blank: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || prefixes == 0 || symbols < 2 {
            return Err(contract("lattice needs T >= 1, U + 1 >= 1 and at least two symbols"));
        }
        if blank >= symbols {
            return Err(Error::Lookup { id: blank, size: symbols });
        }
        if data.len() != frames * prefixes * symbols {
            return Err(contract(format!(
                "lattice data has {} entries, expected {}",
                data.len(),
                frames * prefixes * symbols
            )));
        }
        if data.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite { op: "lattice" });
        }
        Ok(Self {
            frames,
            prefixes,
            symbols,
            blank,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `U + 1`.
    pub fn prefixes(&self) -> usize {
        self.prefixes
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn logp(&self, t: usize, u: usize, k: usize) -> f64 {
        self.data[(t * self.prefixes + u) * self.symbols + k]
    }

    /// Largest deviation of `sum_k exp(logp)` from 1 over all cells.
    pub fn normalization_error(&self) -> f64 {
        self.data
            .chunks(self.symbols)
            .map(|row| (row.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn check_target(&self, target: &[usize]) -> Result<()> {
        if target.len() + 1 != self.prefixes {
            return Err(contract(format!(
                "target of length {} on a lattice with {} prefixes",
                target.len(),
                self.prefixes
            )));
        }
        for &y in target {
            if y == self.blank {
                return Err(contract("blank id inside target"));
            }
            if y >= self.symbols {
                return Err(Error::Lookup { id: y, size: self.symbols });
            }
        }
        Ok(())
    }
}

/// Forward variables `alpha(t, u)`, stored row-major `T × (U + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardVars {
    pub frames: usize,
    pub prefixes: usize,
    pub alpha: Vec<f64>,
}

impl ForwardVars {
    pub fn at(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * self.prefixes + u]
    }
}

pub fn forward_vars(lattice: &LogProbLattice, target: &[usize]) -> Result<ForwardVars> {
    lattice.check_target(target)?;
    let (tn, un) = (lattice.frames, lattice.prefixes);
    let mut alpha = vec![MASKED; tn * un];
    for t in 0..tn {
        for u in 0..un {
            if t == 0 && u == 0 {
                alpha[0] = 0.0;
                continue;
            }
            let from_blank = if t > 0 {
                alpha[(t - 1) * un + u] + lattice.logp(t - 1, u, lattice.blank)
            } else {
                MASKED
            };
            let from_emit = if u > 0 {
                alpha[t * un + u - 1] + lattice.logp(t, u - 1, target[u - 1])
            } else {
                MASKED
            };
            alpha[t * un + u] = log_add_exp(from_blank, from_emit);
        }
    }
    Ok(ForwardVars {
        frames: tn,
        prefixes: un,
        alpha,
    })
}

fn backward_vars(lattice: &LogProbLattice, target: &[usize]) -> Vec<f64> {
    let (tn, un) = (lattice.frames, lattice.prefixes);
    let mut beta = vec![MASKED; tn * un];
    for t in (0..tn).rev() {
        for u in (0..un).rev() {
            let idx = t * un + u;
            if t == tn - 1 && u == un - 1 {
                beta[idx] = lattice.logp(t, u, lattice.blank);
                continue;
            }
            let via_blank = if t + 1 < tn {
                beta[(t + 1) * un + u] + lattice.logp(t, u, lattice.blank)
            } else {
                MASKED
            };
            let via_emit = if u + 1 < un {
                beta[t * un + u + 1] + lattice.logp(t, u, target[u])
            } else {
                MASKED
            };
            beta[idx] = log_add_exp(via_blank, via_emit);
        }
    }
    beta
}

/// Negative log-probability of `target` summed over all alignments.
pub fn forward_loss(lattice: &LogProbLattice, target: &[usize]) -> Result<f64> {
    let fv = forward_vars(lattice, target)?;
    let (t, u) = (lattice.frames - 1, lattice.prefixes - 1);
    Ok(-(fv.at(t, u) + lattice.logp(t, u, lattice.blank)))
}

/// Posterior occupancy of every lattice entry: the probability that an
/// alignment of `target` uses transition `(t, u, k)`. Entries are in `[0, 1]`
/// and `d nll / d logp = -occupancy`.
pub fn occupancy(lattice: &LogProbLattice, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let fv = forward_vars(lattice, target)?;
    let beta = backward_vars(lattice, target);
    let (tn, un, v) = (lattice.frames, lattice.prefixes, lattice.symbols);
    let log_z = fv.at(tn - 1, un - 1) + lattice.logp(tn - 1, un - 1, lattice.blank);
    let mut occ = vec![0.0; tn * un * v];
    for t in 0..tn {
        for u in 0..un {
            let a = fv.at(t, u);
            let blank_next = if t + 1 < tn {
                beta[(t + 1) * un + u]
            } else if u + 1 == un {
                0.0
            } else {
                MASKED
            };
            let base = (t * un + u) * v;
            occ[base + lattice.blank] = (a + lattice.logp(t, u, lattice.blank) + blank_next - log_z).exp();
            if u + 1 < un {
                let y = target[u];
                occ[base + y] = (a + lattice.logp(t, u, y) + beta[t * un + u + 1] - log_z).exp();
            }
        }
    }
    Ok((-log_z, occ))
}

/// Path-enumeration reference for [`forward_loss`].
pub fn brute_force_loss(lattice: &LogProbLattice, target: &[usize]) -> Result<f64> {
    lattice.check_target(target)?;
    if lattice.frames + target.len() > BRUTE_FORCE_BOUND {
        return Err(contract(format!(
            "T + U = {} exceeds the enumeration bound {BRUTE_FORCE_BOUND}",
            lattice.frames + target.len()
        )));
    }
    let mut path_scores = Vec::new();
    enumerate(lattice, target, 0, 0, 0.0, &mut path_scores);
    Ok(-crate::tensor::log_sum_exp(&path_scores))
}

fn enumerate(lattice: &LogProbLattice, target: &[usize], t: usize, u: usize, acc: f64, out: &mut Vec<f64>) {
    let last_t = lattice.frames - 1;
    let blank = acc + lattice.logp(t, u, lattice.blank);
    if t == last_t && u == target.len() {
        out.push(blank);
    } else if t < last_t {
        enumerate(lattice, target, t + 1, u, blank, out);
    }
    if u < target.len() {
        enumerate(lattice, target, t, u + 1, acc + lattice.logp(t, u, target[u]), out);
    }
}

/// Records the loss of `target` on a tape lattice of shape
/// `T(U + 1) × symbols`. Backpropagates exact occupancies.
pub fn transducer_loss<'t>(lattice: Var<'t>, frames: usize, target: &[usize], blank: usize) -> Result<Var<'t>> {
    let value = lattice.value();
    let shape = value.shape();
    if shape.len() != 2 || shape[0] != frames * (target.len() + 1) {
        return Err(Error::Shape {
            op: "transducer_loss",
            lhs: shape.to_vec(),
            rhs: vec![frames * (target.len() + 1), value.cols()],
        });
    }
    let lat = LogProbLattice::new(frames, target.len() + 1, value.cols(), blank, value.data().to_vec())?;
    let (nll, occ) = occupancy(&lat, target)?;
    if !nll.is_finite() {
        return Err(Error::NonFinite { op: "transducer_loss" });
    }
    lattice.scalar_with_grad(nll, occ.into_iter().map(|o| -o).collect())
}
