//! Norm-bounded additive perturbations and their on-disk format.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

use super::AttackError;

const MAGIC: &[u8; 8] = b"SEGADVR1";

/// Declared norm of a perturbation budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormP {
    Linf,
    L2,
}

impl std::fmt::Display for NormP {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormP::Linf => write!(f, "inf"),
            NormP::L2 => write!(f, "2"),
        }
    }
}

/// Real-valued H x W x C additive field with a declared norm budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub values: Tensor,
    pub norm_p: NormP,
    pub epsilon: f64,
}

impl Perturbation {
    pub fn new(values: Tensor, norm_p: NormP, epsilon: f64) -> Result<Self, AttackError> {
        let p = Perturbation { values, norm_p, epsilon };
        p.check_budget()?;
        Ok(p)
    }

    pub fn norm(&self) -> f64 {
        match self.norm_p {
            NormP::Linf => self.values.linf_norm(),
            NormP::L2 => self.values.l2_norm(),
        }
    }

    pub fn check_budget(&self) -> Result<(), AttackError> {
        let n = self.norm();
        if n > self.epsilon + 1e-9 {
            return Err(AttackError::BudgetViolation { norm: n, epsilon: self.epsilon });
        }
        Ok(())
    }

    /// Project the values back into the declared budget ball: elementwise
    /// clamp for l-inf, radial rescale for l2.
    pub fn project(&mut self) {
        match self.norm_p {
            NormP::Linf => {
                let e = self.epsilon;
                for v in self.values.data_mut() {
                    *v = v.clamp(-e, e);
                }
            }
            NormP::L2 => {
                let n = self.values.l2_norm();
                if n > self.epsilon && n > 0.0 {
                    let s = self.epsilon / n;
                    for v in self.values.data_mut() {
                        *v *= s;
                    }
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let shape = self.values.shape();
        assert_eq!(shape.len(), 3, "perturbation must be H x W x C");
        let mut f = File::create(path)?;
        f.write_all(MAGIC)?;
        for &d in shape {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        f.write_all(&[match self.norm_p {
            NormP::Linf => 0u8,
            NormP::L2 => 1u8,
        }])?;
        f.write_all(&self.epsilon.to_le_bytes())?;
        for &v in self.values.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Perturbation, AttackError> {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(AttackError::Format("bad perturbation magic".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let mut norm_byte = [0u8; 1];
        f.read_exact(&mut norm_byte)?;
        let norm_p = match norm_byte[0] {
            0 => NormP::Linf,
            1 => NormP::L2,
            other => return Err(AttackError::Format(format!("unknown norm tag {other}"))),
        };
        let mut eb = [0u8; 8];
        f.read_exact(&mut eb)?;
        let epsilon = f64::from_le_bytes(eb);
        let count = dims[0] * dims[1] * dims[2];
        let mut buf = vec![0u8; count * 8];
        f.read_exact(&mut buf)?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Perturbation { values: Tensor::new(dims.to_vec(), values), norm_p, epsilon })
    }
}
