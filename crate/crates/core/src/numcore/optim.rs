use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// RMSProp running mean of squared gradients, same shape as `value`.
    pub acc: Tensor,
}

/// Named trainable tensors with their optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let (r, c) = value.shape();
        self.entries.insert(
            name,
            Param {
                value,
                acc: Tensor::zeros(r, c),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    /// Parameter value; panics on unknown names since those are programming errors.
    pub fn value(&self, name: &str) -> &Tensor {
        match self.entries.get(name) {
            Some(p) => &p.value,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Binds `name` onto `tape` as a trainable input.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(name, self.value(name))
    }

    /// A copy of the values with fresh (zero) optimizer state.
    pub fn snapshot(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, p) in &self.entries {
            let (r, c) = p.value.shape();
            out.entries.insert(
                k.clone(),
                Param {
                    value: p.value.clone(),
                    acc: Tensor::zeros(r, c),
                },
            );
        }
        out
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, p) in &self.entries {
            h.update(k.as_bytes());
            let (r, c) = p.value.shape();
            h.update((r as u64).to_le_bytes());
            h.update((c as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp {
            lr: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            ..Default::default()
        }
    }

    /// One RMSProp update. Tensors whose gradient holds a non-finite entry are
    /// left untouched; the number of such tensors is returned.
    pub fn step(&self, params: &mut ParamSet, grads: &Gradients) -> Result<usize> {
        let mut skipped = 0;
        for (name, g) in grads {
            let Some(p) = params.entries.get_mut(name) else {
                return Err(Error::config(format!("gradient for unknown parameter `{name}`")));
            };
            if p.value.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "rmsprop_step",
                    lhs: p.value.shape(),
                    rhs: g.shape(),
                });
            }
            if !g.is_finite() {
                skipped += 1;
                continue;
            }
            let (value, acc) = (p.value.data_mut(), p.acc.data_mut());
            for ((w, a), &gv) in value.iter_mut().zip(acc.iter_mut()).zip(g.data()) {
                *a = self.decay * *a + (1.0 - self.decay) * gv * gv;
                *w -= self.lr * gv / (a.sqrt() + self.epsilon);
            }
        }
        if skipped > 0 {
            log::warn!("rmsprop: skipped {skipped} tensor(s) with non-finite gradients");
        }
        Ok(skipped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(name, Tensor::scalar(v)).unwrap();
        ps
    }

    fn grads(name: &str, g: f64) -> Gradients {
        let mut out = Gradients::new();
        out.insert(name.to_string(), Tensor::scalar(g));
        out
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = single("w", 0.37);
        RmsProp::new(0.1).step(&mut ps, &grads("w", 0.0)).unwrap();
        assert_eq!(ps.value("w").item(), 0.37);
    }

    #[test]
    fn first_step_from_empty_accumulator() {
        let mut ps = single("w", 0.0);
        let opt = RmsProp {
            lr: 0.01,
            decay: 0.9,
            epsilon: 1e-8,
        };
        opt.step(&mut ps, &grads("w", 1.0)).unwrap();
        // -0.01 / (sqrt(0.1) + 1e-8)
        assert!((ps.value("w").item() + 0.031_622_775).abs() < 1e-8);
        assert!((ps.param("w").unwrap().acc.item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_converges_to_sign_step() {
        let mut ps = single("w", 0.0);
        let opt = RmsProp::new(0.01);
        for _ in 0..400 {
            opt.step(&mut ps, &grads("w", -2.5)).unwrap();
        }
        let acc = ps.param("w").unwrap().acc.item();
        assert!((acc - 6.25).abs() < 1e-9);
        let before = ps.value("w").item();
        opt.step(&mut ps, &grads("w", -2.5)).unwrap();
        let step = ps.value("w").item() - before;
        assert!((step - 0.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_skips_tensor() {
        let mut ps = single("w", 1.0);
        ps.insert("v", Tensor::scalar(1.0)).unwrap();
        let mut g = grads("w", f64::NAN);
        g.insert("v".into(), Tensor::scalar(1.0));
        let skipped = RmsProp::new(0.1).step(&mut ps, &g).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(ps.value("w").item(), 1.0);
        assert!(ps.value("v").item() < 1.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = single("w", 1.0);
        assert!(ps.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn accumulator_stays_nonnegative() {
        let mut ps = single("w", 0.0);
        let opt = RmsProp::new(0.05);
        for i in 0..50 {
            let g = if i % 2 == 0 { 3.0 } else { -0.1 };
            opt.step(&mut ps, &grads("w", g)).unwrap();
            assert!(ps.param("w").unwrap().acc.item() >= 0.0);
        }
    }
}
