//! Bidirectional GRU classifier with a growable linear head.
//!
//! Layout of the representation: the forward direction's last state and the
//! backward direction's last state are concatenated into one `2·hidden`
//! vector (300 at the production size). Dropout acts on that vector; the
//! head maps it to one logit per class seen so far.
//!
//! The head is stored class-major (`classes × 2·hidden`), so expanding it
//! appends rows and leaves every existing class untouched.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, AdamConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};

pub const HIDDEN: usize = 150;
pub const FEATURE_DIM: usize = 2 * HIDDEN;
pub const DROPOUT: f64 = 0.3;

/// Windows per chunk for the no-grad helpers.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// One GRU direction: `w_input` is `input × 3·hidden`, `w_hidden` is
/// `hidden × 3·hidden`, gates ordered `[update | reset | candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<S> {
    pub w_input: Vec<S>,
    pub w_hidden: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> GruParams<S> {
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut draw = |n: usize| -> Vec<S> { (0..n).map(|_| S::lit(rng.gen_range(-bound..=bound))).collect() };
        let w_input = draw(input * 3 * hidden);
        let w_hidden = draw(hidden * 3 * hidden);
        Self {
            w_input,
            w_hidden,
            bias: vec![S::zero(); 3 * hidden],
        }
    }
}

/// Mini-batch of windows laid out time-major for the recurrent pass.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub len: usize,
    pub steps: usize,
    pub features: usize,
    /// Row `t * len + b` holds timestep `t` of window `b`.
    time_major: Vec<S>,
}

impl<S: Scalar> Batch<S> {
    /// Each window is a row-major `steps × features` matrix.
    pub fn from_windows<T: AsRef<[S]>>(windows: &[T], steps: usize, features: usize) -> Result<Self> {
        if windows.is_empty() || steps == 0 || features == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let len = windows.len();
        let mut time_major = vec![S::zero(); len * steps * features];
        for (b, w) in windows.iter().enumerate() {
            let w = w.as_ref();
            if w.len() != steps * features {
                return Err(Error::Dimension {
                    op: "batch",
                    left: vec![steps, features],
                    right: vec![w.len()],
                });
            }
            for t in 0..steps {
                let dst = (t * len + b) * features;
                time_major[dst..dst + features].copy_from_slice(&w[t * features..(t + 1) * features]);
            }
        }
        Ok(Self {
            len,
            steps,
            features,
            time_major,
        })
    }

    /// From a `B × W × F` tensor.
    pub fn from_tensor(t: &Tensor<S>) -> Result<Self> {
        let [b, w, f] = t.shape() else {
            return Err(Error::Usage(format!("expected a B×W×F tensor, got {:?}", t.shape())));
        };
        let (b, w, f) = (*b, *w, *f);
        let rows: Vec<&[S]> = (0..b).map(|i| &t.data()[i * w * f..(i + 1) * w * f]).collect();
        Self::from_windows(&rows, w, f)
    }
}

/// Parameters bound to a tape for one forward/backward pass.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    pub fwd: [Var; 3],
    pub bwd: [Var; 3],
    pub head_w: Option<Var>,
    pub head_b: Option<Var>,
}

impl Bound {
    /// Parameter handles in [`BiGruClassifier::params`] order.
    pub fn vars(&self) -> Vec<Option<Var>> {
        let mut v: Vec<Option<Var>> = self.fwd.iter().chain(&self.bwd).map(|x| Some(*x)).collect();
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }

    /// Inverse of [`Bound::vars`] for 6 (no head) or 8 handles.
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        let (head_w, head_b) = match vars.len() {
            6 => (None, None),
            8 => (Some(vars[6]), Some(vars[7])),
            n => return Err(Error::Usage(format!("expected 6 or 8 parameter handles, got {n}"))),
        };
        Ok(Self {
            fwd: [vars[0], vars[1], vars[2]],
            bwd: [vars[3], vars[4], vars[5]],
            head_w,
            head_b,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Pooled representation before dropout.
    pub pooled: Var,
    /// Pooled representation after dropout, `B × 2·hidden`.
    pub features: Var,
    /// `B × classes`.
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiGruClassifier<S = f32> {
    input_size: usize,
    hidden: usize,
    dropout_p: f64,
    fwd: GruParams<S>,
    bwd: GruParams<S>,
    head_w: Vec<S>,
    head_b: Vec<S>,
    classes: usize,
    mode: Mode,
    head_locked: bool,
}

impl<S: Scalar> BiGruClassifier<S> {
    /// Production-size model: 150 units per direction, dropout 0.3.
    pub fn new<R: Rng + ?Sized>(input_size: usize, rng: &mut R) -> Result<Self> {
        Self::with_dims(input_size, HIDDEN, DROPOUT, rng)
    }

    /// Arbitrary sizes; used by shrunken test models.
    pub fn with_dims<R: Rng + ?Sized>(input_size: usize, hidden: usize, dropout_p: f64, rng: &mut R) -> Result<Self> {
        if input_size == 0 || hidden == 0 {
            return Err(Error::Parameter("input and hidden sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Parameter(format!("dropout must be in [0, 1), got {dropout_p}")));
        }
        let fwd = GruParams::init(input_size, hidden, rng);
        let bwd = GruParams::init(input_size, hidden, rng);
        Ok(Self {
            input_size,
            hidden,
            dropout_p,
            fwd,
            bwd,
            head_w: Vec::new(),
            head_b: Vec::new(),
            classes: 0,
            mode: Mode::Train,
            head_locked: false,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn forward_params(&self) -> &GruParams<S> {
        &self.fwd
    }

    pub fn backward_params(&self) -> &GruParams<S> {
        &self.bwd
    }

    pub fn head_weights(&self) -> &[S] {
        &self.head_w
    }

    pub fn head_bias(&self) -> &[S] {
        &self.head_b
    }

    /// Marks the start/end of an epoch; the head cannot grow while locked.
    pub fn lock_head(&mut self, locked: bool) {
        self.head_locked = locked;
    }

    /// Appends `new_classes` head rows drawn from the same uniform scheme as
    /// the recurrent weights, bias zero. Draw order: class by class, each
    /// class's `2·hidden` weights in feature order.
    pub fn expand_head<R: Rng + ?Sized>(&mut self, new_classes: usize, rng: &mut R) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::Parameter("head expansion needs at least one class".into()));
        }
        if self.head_locked {
            return Err(Error::Usage("head expansion is only allowed between tasks".into()));
        }
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let d = self.feature_dim();
        self.head_w.reserve(new_classes * d);
        for _ in 0..new_classes * d {
            self.head_w.push(S::lit(rng.gen_range(-bound..=bound)));
        }
        self.head_b.extend(std::iter::repeat(S::zero()).take(new_classes));
        self.classes += new_classes;
        Ok(())
    }

    /// Parameter buffers in a fixed order: forward `w_input, w_hidden, bias`,
    /// backward `w_input, w_hidden, bias`, head weights, head bias.
    pub fn params(&self) -> [&[S]; 8] {
        [
            &self.fwd.w_input,
            &self.fwd.w_hidden,
            &self.fwd.bias,
            &self.bwd.w_input,
            &self.bwd.w_hidden,
            &self.bwd.bias,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<S>; 8] {
        [
            &mut self.fwd.w_input,
            &mut self.fwd.w_hidden,
            &mut self.fwd.bias,
            &mut self.bwd.w_input,
            &mut self.bwd.w_hidden,
            &mut self.bwd.bias,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Flattened copy of every parameter, in [`Self::params`] order.
    pub fn flat_params(&self) -> Vec<S> {
        self.params().iter().flat_map(|p| p.iter().copied()).collect()
    }

    /// Parameters as shaped tensors, headless models omitting the head pair.
    pub fn param_tensors(&self) -> Vec<Tensor<S>> {
        let n = if self.classes > 0 { 8 } else { 6 };
        self.params()
            .iter()
            .zip(self.param_shapes())
            .take(n)
            .map(|(p, shape)| Tensor::from_parts_unchecked(shape, p.to_vec()))
            .collect()
    }

    fn param_shapes(&self) -> [Vec<usize>; 8] {
        let (f, h) = (self.input_size, self.hidden);
        [
            vec![f, 3 * h],
            vec![h, 3 * h],
            vec![3 * h],
            vec![f, 3 * h],
            vec![h, 3 * h],
            vec![3 * h],
            vec![self.classes.max(1), 2 * h],
            vec![self.classes.max(1)],
        ]
    }

    /// Records the parameters on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        let shapes = self.param_shapes();
        let mut leaf = |data: &[S], shape: &[usize]| {
            let t = Tensor::from_parts_unchecked(shape.to_vec(), data.to_vec());
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let fwd = [
            leaf(&self.fwd.w_input, &shapes[0]),
            leaf(&self.fwd.w_hidden, &shapes[1]),
            leaf(&self.fwd.bias, &shapes[2]),
        ];
        let bwd = [
            leaf(&self.bwd.w_input, &shapes[3]),
            leaf(&self.bwd.w_hidden, &shapes[4]),
            leaf(&self.bwd.bias, &shapes[5]),
        ];
        let (head_w, head_b) = if self.classes > 0 {
            (Some(leaf(&self.head_w, &shapes[6])), Some(leaf(&self.head_b, &shapes[7])))
        } else {
            (None, None)
        };
        Bound {
            fwd,
            bwd,
            head_w,
            head_b,
        }
    }

    /// Gradients accumulated on a bound tape, zero-filled where absent.
    pub fn gradients(&self, tape: &Tape<S>, bound: &Bound) -> Vec<Vec<S>> {
        bound
            .vars()
            .into_iter()
            .zip(self.params())
            .map(|(v, p)| match v.and_then(|v| tape.grad(v)) {
                Some(g) => g.to_vec(),
                None => vec![S::zero(); p.len()],
            })
            .collect()
    }

    /// Pooled `B × 2·hidden` representation before dropout.
    fn pooled(&self, tape: &mut Tape<S>, bound: &Bound, batch: &Batch<S>) -> Result<Var> {
        if batch.features != self.input_size {
            return Err(Error::Schema(format!(
                "model expects {} input features, batch has {}",
                self.input_size, batch.features
            )));
        }
        let x = tape.constant(Tensor::from_parts_unchecked(
            vec![batch.steps * batch.len, batch.features],
            batch.time_major.clone(),
        ));
        let mut last = [None, None];
        for (slot, (p, reverse)) in last.iter_mut().zip([(&bound.fwd, false), (&bound.bwd, true)]) {
            let proj = tape.matmul(x, p[0])?;
            let gx = tape.add_bias(proj, p[2])?;
            *slot = Some(tape.gru_sequence(gx, p[1], batch.len, reverse)?);
        }
        tape.concat_cols(last[0].unwrap(), last[1].unwrap())
    }

    fn head(&self, tape: &mut Tape<S>, bound: &Bound, features: Var) -> Result<Var> {
        let (Some(w), Some(b)) = (bound.head_w, bound.head_b) else {
            return Err(Error::Usage("forward needs a non-empty head".into()));
        };
        let z = tape.matmul_ex(features, w, true)?;
        tape.add_bias(z, b)
    }

    /// Full forward pass. Dropout (inverted, scaled by `1/(1-p)`) is applied
    /// only in [`Mode::Train`], drawing the mask from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        batch: &Batch<S>,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let pooled = self.pooled(tape, bound, batch)?;
        let features = if self.mode == Mode::Train && self.dropout_p > 0.0 {
            let keep = 1.0 - self.dropout_p;
            let scale = S::lit(1.0 / keep);
            let n = batch.len * self.feature_dim();
            let mask: Vec<S> = (0..n).map(|_| if rng.gen_bool(keep) { scale } else { S::zero() }).collect();
            tape.mul_const(pooled, mask)?
        } else {
            pooled
        };
        let logits = self.head(tape, bound, features)?;
        Ok(ForwardOutput {
            pooled,
            features,
            logits,
        })
    }

    /// Forward pass with dropout disabled regardless of the mode flag.
    pub fn forward_eval(&self, tape: &mut Tape<S>, bound: &Bound, batch: &Batch<S>) -> Result<ForwardOutput> {
        let features = self.pooled(tape, bound, batch)?;
        let logits = self.head(tape, bound, features)?;
        Ok(ForwardOutput {
            pooled: features,
            features,
            logits,
        })
    }

    /// Eval-mode pooled features, one row per window.
    pub fn extract_features<T: AsRef<[S]>>(&self, windows: &[T], steps: usize) -> Result<Vec<Vec<S>>> {
        self.no_grad(windows, steps, false)
    }

    /// Eval-mode logits, one row per window.
    pub fn logits<T: AsRef<[S]>>(&self, windows: &[T], steps: usize) -> Result<Vec<Vec<S>>> {
        self.no_grad(windows, steps, true)
    }

    fn no_grad<T: AsRef<[S]>>(&self, windows: &[T], steps: usize, logits: bool) -> Result<Vec<Vec<S>>> {
        if let Some(w) = windows.iter().find(|w| w.as_ref().len() != steps * self.input_size) {
            return Err(Error::Schema(format!(
                "window of {} values does not match {} steps × {} features",
                w.as_ref().len(),
                steps,
                self.input_size
            )));
        }
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(EVAL_CHUNK) {
            let batch = Batch::from_windows(chunk, steps, self.input_size)?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let mut v = self.pooled(&mut tape, &bound, &batch)?;
            if logits {
                v = self.head(&mut tape, &bound, v)?;
            }
            let t = tape.value(v);
            out.extend((0..chunk.len()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    /// Same architecture and weights in another precision.
    pub fn cast<T: Scalar>(&self) -> BiGruClassifier<T> {
        let c = |v: &[S]| v.iter().map(|x| T::lit(x.as_f64())).collect::<Vec<T>>();
        let g = |p: &GruParams<S>| GruParams {
            w_input: c(&p.w_input),
            w_hidden: c(&p.w_hidden),
            bias: c(&p.bias),
        };
        BiGruClassifier {
            input_size: self.input_size,
            hidden: self.hidden,
            dropout_p: self.dropout_p,
            fwd: g(&self.fwd),
            bwd: g(&self.bwd),
            head_w: c(&self.head_w),
            head_b: c(&self.head_b),
            classes: self.classes,
            mode: self.mode,
            head_locked: self.head_locked,
        }
    }

    /// Overwrites the parameters from tensors shaped like [`Self::params`].
    pub fn set_params(&mut self, values: &[Vec<S>]) -> Result<()> {
        if values.len() != 8 {
            return Err(Error::Usage("expected 8 parameter buffers".into()));
        }
        for (dst, src) in self.params_mut().into_iter().zip(values) {
            if dst.len() != src.len() {
                return Err(Error::Dimension {
                    op: "set_params",
                    left: vec![dst.len()],
                    right: vec![src.len()],
                });
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }
}
