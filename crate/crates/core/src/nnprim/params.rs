use std::collections::HashSet;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Mat;
use crate::{Error, Result};

/// A structure owning named parameter tensors.
///
/// Gradients use the same type as the parameters they belong to, so a
/// gradient accumulator is just a zeroed clone (see [`zeros_like`]).
pub trait ParamTree {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>);

    fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zeros_like<P: ParamTree + Clone>(params: &P) -> P {
    let mut z = params.clone();
    for (_, t) in z.named_mut() {
        t.fill(0.0);
    }
    z
}

/// CRC32 over every parameter name and its little-endian bytes.
pub fn param_checksum(params: &impl ParamTree) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (name, t) in params.named() {
        h.update(name.as_bytes());
        for v in t.iter() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finalize()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
}

/// Flat, name-addressed snapshot of a parameter tree and its gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn capture<P: ParamTree>(params: &P, grads: Option<&P>) -> Result<Self> {
        let values = params.named();
        let grads: Vec<Mat> = match grads {
            Some(g) => {
                let g: Vec<Mat> = g.named().into_iter().map(|(_, t)| t.clone()).collect();
                if g.len() != values.len() {
                    return Err(Error::shape("gradient tree does not match parameter tree"));
                }
                g
            }
            None => values.iter().map(|(_, t)| Array2::zeros(t.dim())).collect(),
        };
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(values.len());
        for ((name, value), grad) in values.into_iter().zip(grads) {
            if !seen.insert(name.clone()) {
                return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
            }
            if grad.dim() != value.dim() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    grad.dim(),
                    value.dim()
                )));
            }
            entries.push(ParamEntry {
                name,
                value: value.clone(),
                grad,
            });
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copies values back into `params`, matching by name and shape.
    pub fn restore_into(&self, params: &mut impl ParamTree) -> Result<()> {
        for (name, t) in params.named_mut() {
            let e = self
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            if e.value.dim() != t.dim() {
                return Err(Error::shape(format!("`{name}` shape {:?} vs {:?}", e.value.dim(), t.dim())));
            }
            t.assign(&e.value);
        }
        Ok(())
    }
}

/// Matrix of independent `N(0, std^2)` draws.
pub fn normal_mat(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Affine map `y = x W + b` with an optional bias row.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Option<Mat>,
}

impl Linear {
    pub fn init(d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: normal_mat(d_in, d_out, std, rng),
            bias: bias.then(|| Array2::zeros((1, d_out))),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        if x.ncols() != self.d_in() {
            return Err(Error::shape(format!(
                "linear expects width {}, got {}",
                self.d_in(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += &b.row(0);
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        grad.weight += &x.t().dot(dy);
        if let Some(gb) = grad.bias.as_mut() {
            gb.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        }
        dy.dot(&self.weight.t())
    }
}

impl ParamTree for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_applies_bias_per_row() {
        let lin = Linear {
            weight: array![[1.0, 0.0], [0.0, 2.0]],
            bias: Some(array![[0.5, -1.0]]),
        };
        let y = lin.forward(&array![[1.0, 1.0], [2.0, 3.0]]).unwrap();
        assert_eq!(y, array![[1.5, 1.0], [2.5, 5.0]]);
        assert!(lin.forward(&array![[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn param_set_round_trips_and_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::init(3, 2, true, &mut rng);
        let grads = zeros_like(&lin);
        let set = ParamSet::capture(&lin, Some(&grads)).unwrap();
        assert_eq!(set.entries().len(), 2);
        assert_eq!(set.get("bias").unwrap().grad.dim(), (1, 2));

        let mut other = zeros_like(&lin);
        set.restore_into(&mut other).unwrap();
        assert_eq!(other, lin);

        let no_bias = Linear::init(3, 2, false, &mut rng);
        assert!(ParamSet::capture(&no_bias, Some(&lin)).is_err());
    }

    #[test]
    fn checksum_tracks_every_byte() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin = Linear::init(4, 4, true, &mut rng);
        let before = param_checksum(&lin);
        assert_eq!(before, param_checksum(&lin.clone()));
        lin.weight[[2, 3]] = f64::from_bits(lin.weight[[2, 3]].to_bits() ^ 1);
        assert_ne!(before, param_checksum(&lin));
    }
}
