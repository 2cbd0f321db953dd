//! Loss and decision surfaces on a 2-D plane through an input.
//!
//! A grid cell `(i, j)` holds `f(o + i*step*alpha + j*step*beta)` where `o` is
//! the center input and `alpha`, `beta` are sign-normalized directions.
//! Perturbed inputs are clipped to `[0, 1]` before evaluation and clipped
//! cells are counted.

use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attacks::{self, decision_from_logits};
use crate::error::{Error, Result};
use crate::nn::{Network, ScalarObjective};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaKind {
    Random,
    Fgsm,
    LeastLikely,
    Cw,
}

impl BetaKind {
    pub const ALL: [BetaKind; 4] = [BetaKind::Random, BetaKind::Fgsm, BetaKind::LeastLikely, BetaKind::Cw];

    pub fn as_str(&self) -> &'static str {
        match self {
            BetaKind::Random => "random",
            BetaKind::Fgsm => "fgsm",
            BetaKind::LeastLikely => "least_likely",
            BetaKind::Cw => "cw",
        }
    }
}

impl FromStr for BetaKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BetaKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown beta kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    CrossEntropyLoss,
    Decision,
}

impl SurfaceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SurfaceKind::CrossEntropyLoss => "cross_entropy_loss",
            SurfaceKind::Decision => "decision",
        }
    }
}

impl FromStr for SurfaceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy_loss" | "loss" => Ok(SurfaceKind::CrossEntropyLoss),
            "decision" => Ok(SurfaceKind::Decision),
            _ => Err(Error::Config(format!("unknown surface kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionPair {
    pub alpha: Tensor,
    pub beta: Tensor,
    /// Pixel units per grid unit.
    pub step: f64,
    pub beta_kind: BetaKind,
}

impl DirectionPair {
    /// `alpha` = beta_0 (random signs), `beta` = the requested kind at `x`.
    pub fn build(net: &Network, x: &Tensor, label: usize, beta_kind: BetaKind, step: f64, seed: u64) -> Result<Self> {
        let alpha = attacks::direction_random(x.shape(), seed);
        let beta = match beta_kind {
            BetaKind::Random => attacks::direction_random(x.shape(), seed.wrapping_add(1)),
            BetaKind::Fgsm => attacks::direction_fgsm(net, x, label)?,
            BetaKind::LeastLikely => attacks::direction_least_likely(net, x)?,
            BetaKind::Cw => attacks::direction_cw(net, x, label)?,
        };
        Ok(Self {
            alpha,
            beta,
            step,
            beta_kind,
        })
    }

    pub fn validate(&self, input_len: usize) -> Result<()> {
        for (name, t) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            if t.len() != input_len {
                return Err(Error::Shape {
                    expected: vec![input_len],
                    actual: t.shape().to_vec(),
                });
            }
            if t.data().iter().any(|v| ![-1.0, 0.0, 1.0].contains(v)) {
                return Err(Error::Config(format!("{name} is not sign-normalized")));
            }
        }
        if !(self.step.is_finite() && self.step >= 0.0) {
            return Err(Error::Config(format!("bad step {}", self.step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub kind: SurfaceKind,
    pub center_id: usize,
    pub true_label: usize,
    pub beta_kind: BetaKind,
    pub half_extent: usize,
    pub step: f64,
    /// Row-major `(2r+1) x (2r+1)`; row index `i + r` runs along alpha.
    pub values: Vec<f64>,
    pub clipped_cells: usize,
}

impl SurfaceGrid {
    pub fn side(&self) -> usize {
        2 * self.half_extent + 1
    }

    /// Value at grid coordinates `i, j` in `[-r, r]`.
    pub fn at(&self, i: isize, j: isize) -> f64 {
        let r = self.half_extent as isize;
        self.values[((i + r) as usize) * self.side() + (j + r) as usize]
    }

    pub fn center_value(&self) -> f64 {
        self.at(0, 0)
    }

    /// Cells with `max(|i|, |j|) <= radius` in grid units.
    pub fn cells_within(&self, radius: usize) -> impl Iterator<Item = (isize, isize, f64)> + '_ {
        let r = radius.min(self.half_extent) as isize;
        (-r..=r).flat_map(move |i| (-r..=r).map(move |j| (i, j, self.at(i, j))))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "kind,step,half_extent,center_id,true_label,beta_kind,clipped_cells");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            self.kind.as_str(),
            self.step,
            self.half_extent,
            self.center_id,
            self.true_label,
            self.beta_kind.as_str(),
            self.clipped_cells
        );
        let _ = writeln!(out, "i,j,value");
        let r = self.half_extent as isize;
        for i in -r..=r {
            for j in -r..=r {
                let _ = writeln!(out, "{i},{j},{}", self.at(i, j));
            }
        }
        out
    }

    /// Inverse of [`SurfaceGrid::to_csv`]; lines starting with `#` are ignored.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("surface CSV: {msg}"));
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        lines.next().ok_or_else(|| bad("missing metadata header"))?;
        let meta: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("missing metadata row"))?
            .split(',')
            .collect();
        if meta.len() != 7 {
            return Err(bad("metadata row needs 7 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(s));
        let kind: SurfaceKind = meta[0].parse()?;
        let step = meta[1].parse::<f64>().map_err(|_| bad(meta[1]))?;
        let half_extent = num(meta[2])?;
        let side = 2 * half_extent + 1;
        lines.next().ok_or_else(|| bad("missing value header"))?;
        let mut values = vec![f64::NAN; side * side];
        let mut seen = 0;
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(line));
            }
            let i = f[0].parse::<isize>().map_err(|_| bad(line))? + half_extent as isize;
            let j = f[1].parse::<isize>().map_err(|_| bad(line))? + half_extent as isize;
            if i < 0 || j < 0 || i as usize >= side || j as usize >= side {
                return Err(bad(line));
            }
            values[i as usize * side + j as usize] = f[2].parse::<f64>().map_err(|_| bad(line))?;
            seen += 1;
        }
        if seen != side * side || values.iter().any(|v| v.is_nan()) {
            return Err(bad("grid is incomplete"));
        }
        Ok(Self {
            kind,
            step,
            half_extent,
            center_id: num(meta[3])?,
            true_label: num(meta[4])?,
            beta_kind: meta[5].parse()?,
            values,
            clipped_cells: num(meta[6])?,
        })
    }
}

/// `S(x) = Z(x)_t - max_{i != t} Z(x)_i`.
pub fn decision_value(net: &Network, x: &Tensor, t: usize) -> Result<f64> {
    if t >= net.num_classes() {
        return Err(Error::Label {
            label: t,
            num_classes: net.num_classes(),
        });
    }
    let (logits, _) = net.forward(x)?;
    Ok(decision_from_logits(logits.data(), t))
}

fn surface_value(logits: &[f64], t: usize, kind: SurfaceKind) -> Result<f64> {
    Ok(match kind {
        SurfaceKind::Decision => decision_from_logits(logits, t),
        SurfaceKind::CrossEntropyLoss => ScalarObjective::cross_entropy(t).evaluate(logits)?.value,
    })
}

/// Samples the surface on a `(2r+1)^2` grid around `center`.
pub fn sample_surface(
    net: &Network,
    center: &Tensor,
    center_id: usize,
    t: usize,
    dirs: &DirectionPair,
    half_extent: usize,
    kind: SurfaceKind,
) -> Result<SurfaceGrid> {
    dirs.validate(center.len())?;
    if t >= net.num_classes() {
        return Err(Error::Label {
            label: t,
            num_classes: net.num_classes(),
        });
    }
    let r = half_extent as isize;
    let side = 2 * half_extent + 1;
    let o = center.data();
    let (alpha, beta) = (dirs.alpha.data(), dirs.beta.data());
    let rows = (-r..=r)
        .into_par_iter()
        .map(|i| -> Result<Vec<(f64, bool)>> {
            let mut clipped = Vec::with_capacity(side);
            let points: Vec<Vec<f64>> = (-r..=r)
                .map(|j| {
                    let (si, sj) = (i as f64 * dirs.step, j as f64 * dirs.step);
                    let mut any = false;
                    let x = (0..o.len())
                        .map(|k| {
                            let v = o[k] + si * alpha[k] + sj * beta[k];
                            let c = v.clamp(0.0, 1.0);
                            any |= c != v;
                            c
                        })
                        .collect();
                    clipped.push(any);
                    x
                })
                .collect();
            let views: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
            net.logits_batch(&views)?
                .iter()
                .zip(clipped)
                .map(|(z, c)| Ok((surface_value(z, t, kind)?, c)))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(side * side);
    let mut clipped_cells = 0;
    for (v, c) in rows.into_iter().flatten() {
        values.push(v);
        clipped_cells += c as usize;
    }
    Ok(SurfaceGrid {
        kind,
        center_id,
        true_label: t,
        beta_kind: dirs.beta_kind,
        half_extent,
        step: dirs.step,
        values,
        clipped_cells,
    })
}

pub fn export_grid(grid: &SurfaceGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, grid.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn import_grid(path: impl AsRef<Path>) -> Result<SurfaceGrid> {
    let path = path.as_ref();
    SurfaceGrid::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp_layers, LayerParams, LayerSpec};

    fn small_net() -> Network {
        Network::init(vec![6], 3, mlp_layers(6, &[8], 3), &mut crate::rng(2)).unwrap()
    }

    #[test]
    fn decision_value_examples() {
        let net = Network::new(
            vec![3],
            3,
            vec![LayerSpec::Dense { in_dim: 3, out_dim: 3 }],
            vec![LayerParams {
                weight: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                bias: vec![0.0; 3],
            }],
        )
        .unwrap();
        let x = Tensor::from_vec(vec![3.0, 1.0, 0.0]).unwrap();
        assert_eq!(decision_value(&net, &x, 0).unwrap(), 2.0);
        assert_eq!(decision_value(&net, &x, 1).unwrap(), -2.0);
    }

    #[test]
    fn degenerate_grids() {
        let net = small_net();
        let x = Tensor::from_vec(vec![0.4, 0.5, 0.6, 0.2, 0.8, 0.3]).unwrap();
        let dirs = DirectionPair::build(&net, &x, 1, BetaKind::Cw, 0.05, 3).unwrap();
        let g = sample_surface(&net, &x, 0, 1, &dirs, 0, SurfaceKind::Decision).unwrap();
        assert_eq!(g.values, vec![decision_value(&net, &x, 1).unwrap()]);
        assert_eq!(g.to_csv().lines().count(), 4);

        let zero = DirectionPair {
            alpha: Tensor::zeros(&[6]),
            beta: Tensor::zeros(&[6]),
            step: 0.05,
            beta_kind: BetaKind::Random,
        };
        let g = sample_surface(&net, &x, 0, 1, &zero, 3, SurfaceKind::CrossEntropyLoss).unwrap();
        assert!(g.values.iter().all(|&v| v == g.values[0]));
    }

    #[test]
    fn negating_alpha_mirrors_rows() {
        let net = small_net();
        let x = Tensor::from_vec(vec![0.4, 0.5, 0.6, 0.5, 0.5, 0.3]).unwrap();
        let dirs = DirectionPair::build(&net, &x, 2, BetaKind::Fgsm, 0.02, 8).unwrap();
        let mut flipped = dirs.clone();
        flipped.alpha = dirs.alpha.map(|v| -v);
        let a = sample_surface(&net, &x, 0, 2, &dirs, 5, SurfaceKind::Decision).unwrap();
        let b = sample_surface(&net, &x, 0, 2, &flipped, 5, SurfaceKind::Decision).unwrap();
        assert_eq!(a.clipped_cells, 0);
        for i in -5..=5 {
            for j in -5..=5 {
                assert_eq!(a.at(i, j), b.at(-i, j));
            }
        }
    }

    #[test]
    fn csv_round_trip_and_row_count() {
        let net = small_net();
        let x = Tensor::from_vec(vec![0.1, 0.9, 0.6, 0.2, 0.8, 0.3]).unwrap();
        let dirs = DirectionPair::build(&net, &x, 0, BetaKind::LeastLikely, 0.05, 1).unwrap();
        let g = sample_surface(&net, &x, 4, 0, &dirs, 20, SurfaceKind::Decision).unwrap();
        assert!(g.clipped_cells > 0);
        let csv = g.to_csv();
        assert_eq!(csv.lines().count() - 3, 1681);
        let back = SurfaceGrid::from_csv(&format!("# seed=1\n{csv}")).unwrap();
        assert_eq!(back, g);
        assert!(SurfaceGrid::from_csv(&csv[..csv.len() - 30]).is_err());
    }

    #[test]
    fn rejects_unnormalized_directions() {
        let net = small_net();
        let x = Tensor::from_vec(vec![0.5; 6]).unwrap();
        let dirs = DirectionPair {
            alpha: Tensor::from_vec(vec![0.5; 6]).unwrap(),
            beta: Tensor::zeros(&[6]),
            step: 0.1,
            beta_kind: BetaKind::Random,
        };
        assert!(sample_surface(&net, &x, 0, 0, &dirs, 1, SurfaceKind::Decision).is_err());
    }
}
