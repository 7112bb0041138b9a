//! Synthetic instances emitted as genuine turnstile streams.
//!
//! Every nonzero entry is split into one to three additive pieces and all
//! pieces are shuffled, so no row arrives contiguously.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::fold_rows;
use crate::loss::LossKind;
use crate::numeric::norm_pp;
use crate::stream::{StreamHeader, TurnstileUpdate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthKind {
    /// Gaussian background plus `planted` rows of mass `heavy_ratio * M`,
    /// `M` the background mass `Σ ‖a_i‖_p^p`.
    PlantedHeavy { p: f64, heavy_ratio: f64, planted: usize },
    /// Every row equal to `value * (1, ..., 1)`.
    IdenticalRows { value: f64 },
    /// Gaussian design. With a fold, labels come from a planted model and are
    /// folded into the rows; `tail` draws row scales from a Student t.
    Gaussian { fold: Option<LossKind>, tail: Option<f64> },
    /// Row `i` is `n / (i + 1)` in column `i mod d`.
    HarmonicDemo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub kind: SynthKind,
    pub n: u64,
    pub d: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub spec: SynthSpec,
    pub header: StreamHeader,
    pub updates: Vec<TurnstileUpdate>,
    /// Exact matrix the stream sums to.
    pub matrix: DMatrix<f64>,
    pub heavy_rows: Vec<u64>,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: u64, d: usize, seed: u64) -> Self {
        Self { kind, n, d, seed }
    }

    /// Columns of the generated matrix (a folded lp instance gains one).
    pub fn columns(&self) -> usize {
        match &self.kind {
            SynthKind::Gaussian { fold: Some(LossKind::Lp { .. }), .. } => self.d + 1,
            _ => self.d,
        }
    }

    pub fn matrix(&self) -> Result<(DMatrix<f64>, Vec<u64>)> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidConfig("generator needs positive n and d".into()));
        }
        let n = self.n as usize;
        let d = self.d;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        match &self.kind {
            SynthKind::IdenticalRows { value } => Ok((DMatrix::from_element(n, d, *value), Vec::new())),
            SynthKind::HarmonicDemo => {
                let a = DMatrix::from_fn(n, d, |i, c| if c == i % d { n as f64 / (i + 1) as f64 } else { 0.0 });
                Ok((a, vec![0]))
            }
            SynthKind::PlantedHeavy { p, heavy_ratio, planted } => {
                if *planted >= n {
                    return Err(Error::InvalidConfig("more planted rows than rows".into()));
                }
                let mut a = DMatrix::from_fn(n, d, |_, _| gauss(&mut rng));
                let mut rows: Vec<usize> = (0..n).collect();
                rows.shuffle(&mut rng);
                let mut heavy: Vec<u64> = rows[..*planted].iter().map(|&i| i as u64).collect();
                heavy.sort_unstable();
                let background: f64 = (0..n)
                    .filter(|i| !heavy.contains(&(*i as u64)))
                    .map(|i| norm_pp(&a.row(i).iter().copied().collect::<Vec<_>>(), *p))
                    .sum();
                let target = heavy_ratio * background;
                for &h in &heavy {
                    let h = h as usize;
                    let cur = norm_pp(&a.row(h).iter().copied().collect::<Vec<_>>(), *p);
                    let f = (target / cur).powf(1.0 / p);
                    a.row_mut(h).scale_mut(f);
                }
                Ok((a, heavy))
            }
            SynthKind::Gaussian { fold, tail } => {
                let mut x = DMatrix::from_fn(n, d, |_, _| gauss(&mut rng));
                if let Some(nu) = tail {
                    let t = StudentT::new(*nu).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                    for i in 0..n {
                        let s = t.sample(&mut rng).abs().max(1e-3);
                        x.row_mut(i).scale_mut(s);
                    }
                }
                let Some(loss) = fold else {
                    return Ok((x, Vec::new()));
                };
                let beta = DVector::from_fn(d, |c, _| if c % 2 == 0 { 1.0 } else { -0.5 } * (1.0 + c as f64 / d as f64));
                let signal = &x * &beta;
                let y: Vec<f64> = match loss {
                    LossKind::Lp { .. } => signal.iter().map(|s| s + gauss(&mut rng)).collect(),
                    _ => signal
                        .iter()
                        .map(|s| {
                            let u: f64 = rng.random_range(1e-12..1.0);
                            let noise = (u / (1.0 - u)).ln();
                            if s + 2.0 * noise > 0.0 { 1.0 } else { -1.0 }
                        })
                        .collect(),
                };
                Ok((fold_rows(&x, &y, loss)?, Vec::new()))
            }
        }
    }

    pub fn generate(&self) -> Result<Generated> {
        let (matrix, heavy_rows) = self.matrix()?;
        let header = StreamHeader::new(self.n, matrix.ncols())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_5eed_5eed_5eed);
        let updates = split_and_shuffle(&matrix, &mut rng);
        Ok(Generated { spec: self.clone(), header, updates, matrix, heavy_rows })
    }
}

/// Pieces of every nonzero entry in random global order.
pub fn split_and_shuffle<R: Rng>(a: &DMatrix<f64>, rng: &mut R) -> Vec<TurnstileUpdate> {
    let mut out = Vec::new();
    for i in 0..a.nrows() {
        for c in 0..a.ncols() {
            let v = a[(i, c)];
            if v == 0.0 {
                continue;
            }
            let pieces = rng.random_range(1..=3);
            let mut rest = v;
            for _ in 1..pieces {
                let part = v * rng.random_range(-1.0..2.0);
                out.push(TurnstileUpdate::new(i as u64, c, part));
                rest -= part;
            }
            out.push(TurnstileUpdate::new(i as u64, c, rest));
        }
    }
    out.shuffle(rng);
    out
}

/// Dense matrix as CSV without header.
pub fn write_matrix_csv<W: Write>(mut w: W, a: &DMatrix<f64>) -> Result<()> {
    for i in 0..a.nrows() {
        let row: Vec<String> = a.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: BufRead>(r: R) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(c, s)| {
                s.trim().parse::<f64>().map_err(|_| Error::Csv { record: no + 1, column: c + 1, msg: format!("bad number `{s}`") })
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.first().is_some_and(|f| f.len() != row.len()) {
            return Err(Error::Csv { record: no + 1, column: row.len(), msg: "ragged row".into() });
        }
        rows.push(row);
    }
    let d = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), d, |i, c| rows[i][c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::replay_dense;

    #[test]
    fn identical_rows_sidecar() {
        let g = SynthSpec::new(SynthKind::IdenticalRows { value: 1.0 }, 4, 2, 1).generate().unwrap();
        assert_eq!(g.matrix, DMatrix::from_element(4, 2, 1.0));
    }

    #[test]
    fn replay_matches_sidecar() {
        let kinds = [
            SynthKind::PlantedHeavy { p: 1.5, heavy_ratio: 0.2, planted: 2 },
            SynthKind::IdenticalRows { value: -0.3 },
            SynthKind::Gaussian { fold: Some(LossKind::Logistic), tail: Some(2.0) },
            SynthKind::Gaussian { fold: Some(LossKind::Lp { p: 1.0 }), tail: None },
            SynthKind::HarmonicDemo,
        ];
        for kind in kinds {
            let g = SynthSpec::new(kind.clone(), 60, 3, 9).generate().unwrap();
            let back = replay_dense(&g.header, &g.updates);
            let err = (&back - &g.matrix).amax();
            assert!(err <= 1e-12 * g.matrix.amax(), "{kind:?}: {err}");
        }
    }

    #[test]
    fn planted_rows_have_requested_mass() {
        let g = SynthSpec::new(SynthKind::PlantedHeavy { p: 1.0, heavy_ratio: 0.5, planted: 1 }, 100, 4, 3)
            .generate()
            .unwrap();
        assert_eq!(g.heavy_rows.len(), 1);
        let h = g.heavy_rows[0] as usize;
        let mass = |i: usize| norm_pp(&g.matrix.row(i).iter().copied().collect::<Vec<_>>(), 1.0);
        let bg: f64 = (0..100).filter(|&i| i != h).map(mass).sum();
        assert!((mass(h) / bg - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, -2.0, 1e-300, 3.0]);
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &a).unwrap();
        assert_eq!(read_matrix_csv(&buf[..]).unwrap(), a);
    }
}
