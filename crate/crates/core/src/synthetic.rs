//! Stand-in dynamics with known behavior, plugged in where the backbone
//! normally goes. Only anchor rows are transformed; token rows pass through.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anchor::AnchorDynamics;
use crate::backbone::SequenceLayout;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum MapKind<T> {
    /// `A -> rho * A + offset`.
    Contraction { rho: f64, offset: Tensor<T> },
    /// Rotates every row by `angle` in the `(i, j)` coordinate plane.
    Rotation { angle: f64, plane: (usize, usize) },
    /// Cycles through `period` fixed states `amplitude * (cos, sin)` of a
    /// seeded orthonormal pair of directions; whichever state is nearest to
    /// the input is followed by the next one.
    Oscillator { period: usize, amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticMap<T> {
    pub kind: MapKind<T>,
    pub seed: u64,
    m: usize,
    d: usize,
}

impl<T: Scalar> SyntheticMap<T> {
    pub fn contraction(rho: f64, offset: Tensor<T>) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Range(format!("contraction factor {rho}")));
        }
        let (m, d) = offset.matrix_dims("contraction")?;
        Ok(SyntheticMap {
            kind: MapKind::Contraction { rho, offset },
            seed: 0,
            m,
            d,
        })
    }

    /// Contraction with a seeded offset whose entries have mean `mean`, so the
    /// fixed point has a non-vanishing mean row.
    pub fn seeded_contraction(rho: f64, m: usize, d: usize, mean: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(mean, 0.5).expect("valid normal");
        let values = (0..m * d).map(|_| T::lit(dist.sample(&mut rng))).collect();
        let mut map = Self::contraction(rho, Tensor::matrix(m, d, values)?)?;
        map.seed = seed;
        Ok(map)
    }

    pub fn rotation(angle: f64, plane: (usize, usize), m: usize, d: usize) -> Result<Self> {
        if plane.0 == plane.1 || plane.0 >= d || plane.1 >= d {
            return Err(Error::Range(format!("rotation plane {plane:?} for d = {d}")));
        }
        Ok(SyntheticMap {
            kind: MapKind::Rotation { angle, plane },
            seed: 0,
            m,
            d,
        })
    }

    pub fn oscillator(period: usize, amplitude: f64, m: usize, d: usize, seed: u64) -> Result<Self> {
        if period < 2 {
            return Err(Error::Range(format!("oscillator period {period}")));
        }
        if m * d < 2 {
            return Err(Error::Range("oscillator needs at least two entries".into()));
        }
        Ok(SyntheticMap {
            kind: MapKind::Oscillator { period, amplitude },
            seed,
            m,
            d,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.d)
    }

    fn oscillator_states(&self, period: usize, amplitude: f64) -> Vec<Vec<T>> {
        // Two orthonormal directions in R^(m*d) by Gram-Schmidt on seeded noise.
        let n = self.m * self.d;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dist = Normal::new(0.0, 1.0).expect("valid normal");
        let mut u: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let mut w: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= nu);
        let p: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(&u).for_each(|(x, a)| *x -= p * a);
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= nw);
        (0..period)
            .map(|j| {
                let phase = 2.0 * std::f64::consts::PI * j as f64 / period as f64;
                let (s, c) = phase.sin_cos();
                u.iter()
                    .zip(&w)
                    .map(|(a, b)| T::lit(amplitude * (c * a + s * b)))
                    .collect()
            })
            .collect()
    }

    pub fn step_map(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != [self.m, self.d] {
            return Err(Error::dim("step_map", a.shape(), &[self.m, self.d]));
        }
        let out = match &self.kind {
            MapKind::Contraction { rho, offset } => {
                let r = T::lit(*rho);
                a.values().iter().zip(offset.values()).map(|(&x, &b)| r * x + b).collect()
            }
            MapKind::Rotation { angle, plane: (i, j) } => {
                let (s, c) = (T::lit(angle.sin()), T::lit(angle.cos()));
                let mut v = a.values().to_vec();
                for row in v.chunks_mut(self.d) {
                    let (xi, xj) = (row[*i], row[*j]);
                    row[*i] = c * xi - s * xj;
                    row[*j] = s * xi + c * xj;
                }
                v
            }
            MapKind::Oscillator { period, amplitude } => {
                let states = self.oscillator_states(*period, *amplitude);
                let dist = |s: &[T]| -> T { s.iter().zip(a.values()).map(|(&p, &q)| (p - q) * (p - q)).sum() };
                let mut nearest = 0;
                for (k, s) in states.iter().enumerate() {
                    if dist(s) < dist(&states[nearest]) {
                        nearest = k;
                    }
                }
                states[(nearest + 1) % period].clone()
            }
        };
        Tensor::matrix(self.m, self.d, out)
    }

    pub fn fixed_point(&self) -> Option<Tensor<T>> {
        match &self.kind {
            MapKind::Contraction { rho, offset } => {
                let inv = T::one() / (T::one() - T::lit(*rho));
                let values = offset.values().iter().map(|&b| b * inv).collect();
                Some(Tensor::matrix(self.m, self.d, values).expect("offset shape"))
            }
            MapKind::Rotation { .. } | MapKind::Oscillator { .. } => None,
        }
    }
}

impl<T: Scalar> AnchorDynamics<T> for SyntheticMap<T> {
    fn hidden_states(&self, g: &mut Graph<T>, input: Var, _: &[usize], layout: &SequenceLayout) -> Result<Var> {
        let x = g.value(input);
        let m = layout.anchors;
        if m != self.m || x.cols() != self.d || x.rows() < m {
            return Err(Error::dim("synthetic map", x.shape(), &[self.m, self.d]));
        }
        let d = self.d;
        let anchors = Tensor::matrix(m, d, x.values()[..m * d].to_vec())?;
        let mut out = self.step_map(&anchors)?.into_values();
        out.extend_from_slice(&x.values()[m * d..]);
        let h = Tensor::matrix(x.rows(), d, out)?;
        Ok(g.constant(h))
    }
}
