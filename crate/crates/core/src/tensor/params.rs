//! Named trainable parameters, their accumulated gradients, and
//! directory-based checkpoints (one NST file per parameter plus a manifest).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_nst, write_nst, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Accumulated gradient, same shape as `value`. Backward adds into this;
    /// it only resets on `zero_grad`.
    pub grad: Tensor,
}

/// Registration-ordered parameter set. Order is part of the public contract:
/// checkpoints and optimizer state index parameters by it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    grads_live: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), grads_live: false }
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter { name: name.to_string(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    /// Mutable value together with its (read-only) gradient, for optimizers.
    pub fn update_view(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        let p = &mut self.params[id.0];
        (&mut p.value, &p.grad)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// True once any backward pass has accumulated gradients.
    pub fn grads_live(&self) -> bool {
        self.grads_live
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let g = self.params[id.0].grad.data_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        self.grads_live = true;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
        self.grads_live = false;
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Writes one NST file per parameter plus `manifest.txt` mapping
    /// name -> filename -> shape, in registration order.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, p) in self.params.iter().enumerate() {
            let filename = format!("p{i:04}.nst");
            write_nst(&dir.join(&filename), &p.value)?;
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{}\t{}\t{}\n", p.name, filename, dims.join("x")));
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Fills existing parameters from a checkpoint directory. The store must
    /// already hold the same parameter set (same names, same shapes); any
    /// difference is reported with the offending names.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        let manifest_path = dir.join("manifest.txt");
        let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Data(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let mut seen = vec![false; self.params.len()];
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Data(format!(
                    "manifest line {}: expected name<TAB>file<TAB>shape",
                    lineno + 1
                )));
            }
            let (name, filename) = (fields[0], fields[1]);
            let id = self.find(name).ok_or_else(|| {
                Error::Data(format!("checkpoint has unknown parameter `{name}`"))
            })?;
            let tensor = read_nst(&dir.join(filename))?;
            if tensor.shape() != self.params[id.0].value.shape() {
                return Err(Error::Data(format!(
                    "parameter `{name}`: checkpoint shape {:?} != model shape {:?}",
                    tensor.shape(),
                    self.params[id.0].value.shape()
                )));
            }
            self.params[id.0].value = tensor;
            seen[id.0] = true;
        }
        let missing: Vec<&str> = self
            .params
            .iter()
            .zip(&seen)
            .filter(|(_, s)| !**s)
            .map(|(p, _)| p.name.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "checkpoint is missing parameters: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }
}
