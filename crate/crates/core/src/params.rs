//! Named parameter and buffer storage, and the forward-pass context that
//! binds parameters onto a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::checkpoint::TensorArchive;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Trainable parameters plus non-trainable state (running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the tape gradients of bound parameters into the stored gradients.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bindings: &Bindings) {
        for &(id, var) in &bindings.0 {
            if let Some(g) = tape.grad(var) {
                let acc = self.params[id.0].grad.data_mut();
                for (a, &v) in acc.iter_mut().zip(g.data()) {
                    *a = *a + v;
                }
            }
        }
    }

    /// Parameters and buffers, in registration order, as `f32`.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        self.append_to(&mut a)?;
        Ok(a)
    }

    pub fn append_to(&self, a: &mut TensorArchive) -> Result<()> {
        for p in &self.params {
            a.push(p.name.clone(), p.value.cast())?;
        }
        for b in &self.buffers {
            a.push(b.name.clone(), b.value.cast())?;
        }
        Ok(())
    }

    /// Overwrites every parameter and buffer from `archive`. Fails on the
    /// first missing or differently shaped tensor, naming it.
    pub fn load_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = archive.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name} missing from checkpoint"))
            })?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?} in checkpoint, model expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t.cast())
        };
        let params = self
            .params
            .iter()
            .map(|p| fetch(&p.name, p.value.shape()))
            .collect::<Result<Vec<_>>>()?;
        let buffers = self
            .buffers
            .iter()
            .map(|b| fetch(&b.name, b.value.shape()))
            .collect::<Result<Vec<_>>>()?;
        for (p, v) in self.params.iter_mut().zip(params) {
            p.value = v;
        }
        for (b, v) in self.buffers.iter_mut().zip(buffers) {
            b.value = v;
        }
        Ok(())
    }
}

/// Parameter-to-tape-leaf mapping produced by one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings(Vec<(ParamId, Var)>);

impl Bindings {
    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.0.iter().find(|(p, _)| *p == id).map(|&(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.0.iter().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, parameters tracked for gradients.
    Train,
    /// Running statistics, parameters detached.
    Eval,
}

/// Forward-pass context: the tape being recorded and the parameter store.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    /// Track parameter gradients even in eval mode.
    pub track_params: bool,
    bound: Vec<Option<Var>>,
    bindings: Vec<(ParamId, Var)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        let n = store.params.len();
        Self {
            tape,
            store,
            mode,
            track_params: mode == Mode::Train,
            bound: vec![None; n],
            bindings: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Tape leaf holding the current value of `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if id.0 >= self.bound.len() {
            self.bound.resize(id.0 + 1, None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .tape
            .leaf(self.store.params[id.0].value.clone(), self.track_params);
        self.bound[id.0] = Some(v);
        self.bindings.push((id, v));
        v
    }

    /// Uses `var` for parameter `id` instead of a fresh leaf. Must precede
    /// the first [`Ctx::param`] call for `id`.
    pub fn bind(&mut self, id: ParamId, var: Var) -> Result<()> {
        if id.0 >= self.bound.len() {
            self.bound.resize(id.0 + 1, None);
        }
        if self.bound[id.0].is_some() {
            return Err(Error::contract(format!(
                "parameter {} already bound",
                self.store.params[id.0].name
            )));
        }
        if self.tape.shape(var) != self.store.params[id.0].value.shape() {
            return Err(Error::shape(format!(
                "binding for {} has the wrong shape",
                self.store.params[id.0].name
            )));
        }
        self.bound[id.0] = Some(var);
        self.bindings.push((id, var));
        Ok(())
    }

    pub fn into_bindings(self) -> Bindings {
        Bindings(self.bindings)
    }
}

/// Deterministic generator for parameter initialization; `stream`
/// separates independently seeded submodules.
pub fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
