//! Dense float64 tensors: the substrate every parameter group is made of.
//!
//! All tensors here are two-dimensional matrices in row-major order; vectors
//! are `1 x n` rows and scalars `1 x 1`. A tensor owns its values, an
//! optional gradient of identical shape, a trainability flag the optimizer
//! honors exactly, and a name that must be unique within any collection of
//! parameters bound to one computation tape.

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, SplitRng};

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub trainable: bool,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            trainable: true,
        }
    }

    pub fn from_vec(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { name: name.into(), shape: shape.to_vec(), data, grad: None, trainable: true })
    }

    pub fn normal(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut SplitRng) -> Tensor {
        let mut t = Tensor::zeros(name, shape);
        rng.fill_normal(&mut t.data, std);
        t
    }

    pub fn full(name: impl Into<String>, shape: &[usize], value: f64) -> Tensor {
        let mut t = Tensor::zeros(name, shape);
        t.data.fill(value);
        t
    }

    /// Identity matrix `n x n`.
    pub fn eye(name: impl Into<String>, n: usize) -> Tensor {
        let mut t = Tensor::zeros(name, &[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[1]
        }
    }

    pub fn frozen(mut self) -> Tensor {
        self.trainable = false;
        self
    }

    /// Add `g` into the gradient slot, allocating zeros first if absent.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor {} of {} elements",
                g.len(),
                self.name,
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Order-sensitive content hash over name, shape and the exact value
    /// bits. Equal digests before and after a training run prove the tensor
    /// was untouched.
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.name.len() + 8 * (self.shape.len() + self.data.len()));
        bytes.extend_from_slice(self.name.as_bytes());
        for &s in &self.shape {
            bytes.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &v in &self.data {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

/// A named set of tensors that trains, checkpoints and digests as a unit.
///
/// `visit` must enumerate tensors in a stable, documented order; the
/// checkpoint format and the parameter digests both rely on it.
pub trait ParamGroup {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor));

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Combined digest over all tensors in visit order, rendered as hex.
    fn digest(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        self.visit(&mut |t| {
            h ^= t.digest();
            h = h.wrapping_mul(0x100000001b3);
        });
        format!("{h:016x}")
    }

    fn set_trainable_all(&mut self, flag: bool) {
        self.visit_mut(&mut |t| t.trainable = flag);
    }

    /// Set the flag on exactly the named tensors; unknown names are an error.
    fn set_trainable_names(&mut self, names: &[&str], flag: bool) -> Result<()> {
        let mut remaining: Vec<&str> = names.to_vec();
        self.visit_mut(&mut |t| {
            if let Some(pos) = remaining.iter().position(|n| *n == t.name) {
                remaining.swap_remove(pos);
                t.trainable = flag;
            }
        });
        if let Some(unknown) = remaining.first() {
            return Err(Error::Usage(format!("unknown parameter name: {unknown}")));
        }
        Ok(())
    }

    /// Snapshot of every tensor's values, for best-epoch restoration.
    fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.tensors().iter().map(|t| (t.name.clone(), t.data.clone())).collect()
    }

    fn restore(&mut self, snap: &[(String, Vec<f64>)]) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        self.visit_mut(&mut |t| {
            if err.is_some() {
                return;
            }
            match snap.get(i) {
                Some((name, data)) if *name == t.name && data.len() == t.data.len() => {
                    t.data.copy_from_slice(data);
                }
                _ => err = Some(Error::Usage(format!("snapshot does not match tensor {}", t.name))),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != snap.len() {
            return Err(Error::Usage("snapshot length does not match group".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec("t", &[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec("t", &[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn digest_tracks_content() {
        let a = Tensor::from_vec("w", &[2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.data[0] = f64::from_bits(b.data[0].to_bits() ^ 1);
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn accumulate_grad_adds() {
        let mut t = Tensor::zeros("t", &[2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5][..]));
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
