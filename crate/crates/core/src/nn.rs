//! Small layers built from tape primitives, shared by every network.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// Declared shape and initializer for one named parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Resolves a parameter by name, checking its shape.
pub fn lookup<F: Real>(store: &ParamStore<F>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::input(format!("parameter {name} missing from store")))?;
    let got = store.get(id).shape();
    if got != shape {
        return Err(Error::input(format!(
            "parameter {name} has shape {got:?}, expected {shape:?}"
        )));
    }
    Ok(id)
}

/// Lifts a vector to a one-row matrix; matrices pass through.
pub fn as_rows<F: Real>(t: &mut Tape<'_, F>, x: Var) -> Result<Var> {
    match t.shape(x).len() {
        1 => {
            let n = t.shape(x)[0];
            t.reshape(x, &[1, n])
        }
        _ => Ok(x),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn specs(prefix: &str, input: usize, output: usize, bias: bool) -> Vec<ParamSpec> {
        let mut v = vec![ParamSpec::new(format!("{prefix}.w"), &[input, output], Init::Xavier)];
        if bias {
            v.push(ParamSpec::new(format!("{prefix}.b"), &[output], Init::Zeros));
        }
        v
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, prefix: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let w = lookup(store, &format!("{prefix}.w"), &[input, output])?;
        let b = if bias {
            Some(lookup(store, &format!("{prefix}.b"), &[output])?)
        } else {
            None
        };
        Ok(Linear { w, b, input, output })
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    /// `x W + b` for `x` of shape `[m, in]` (-> `[m, out]`) or `[in]` (-> `[out]`).
    pub fn forward<F: Real>(&self, t: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let vector = t.shape(x).len() == 1;
        let xr = as_rows(t, x)?;
        let w = t.param(self.w);
        let mut y = t.matmul(xr, w)?;
        if let Some(b) = self.b {
            let b = t.param(b);
            y = t.add_row(y, b)?;
        }
        if vector {
            y = t.reshape(y, &[self.output])?;
        }
        Ok(y)
    }
}

/// Input projection followed by residual blocks
/// `h <- relu(W2 relu(W1 h + b1) + b2) + h`.
#[derive(Debug, Clone)]
pub struct ResidualMlp {
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
}

impl ResidualMlp {
    pub fn specs(prefix: &str, input: usize, width: usize, blocks: usize) -> Vec<ParamSpec> {
        let mut v = Linear::specs(&format!("{prefix}.in"), input, width, true);
        for k in 0..blocks {
            v.extend(Linear::specs(&format!("{prefix}.res{k}.a"), width, width, true));
            v.extend(Linear::specs(&format!("{prefix}.res{k}.b"), width, width, true));
        }
        v
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, prefix: &str, input: usize, width: usize, blocks: usize) -> Result<Self> {
        let inp = Linear::bind(store, &format!("{prefix}.in"), input, width, true)?;
        let blocks = (0..blocks)
            .map(|k| {
                Ok((
                    Linear::bind(store, &format!("{prefix}.res{k}.a"), width, width, true)?,
                    Linear::bind(store, &format!("{prefix}.res{k}.b"), width, width, true)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(ResidualMlp { input: inp, blocks })
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let mut h = self.input.forward(t, x)?;
        for (a, b) in &self.blocks {
            let u = a.forward(t, h)?;
            let u = t.relu(u);
            let u = b.forward(t, u)?;
            let u = t.relu(u);
            h = t.add(u, h)?;
        }
        Ok(h)
    }
}

/// Single-direction LSTM with gate order (input, forget, cell, output).
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    ih: Linear,
    hh: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn specs(prefix: &str, input: usize, hidden: usize) -> Vec<ParamSpec> {
        let mut v = Linear::specs(&format!("{prefix}.ih"), input, 4 * hidden, true);
        v.extend(Linear::specs(&format!("{prefix}.hh"), hidden, 4 * hidden, false));
        v
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Lstm {
            ih: Linear::bind(store, &format!("{prefix}.ih"), input, 4 * hidden, true)?,
            hh: Linear::bind(store, &format!("{prefix}.hh"), hidden, 4 * hidden, false)?,
            hidden,
        })
    }

    /// Runs over the rows of `xs` (`[n, in]`), right to left when
    /// `reverse`; returns states aligned with input positions, `[n, hidden]`.
    pub fn forward<F: Real>(&self, t: &mut Tape<'_, F>, xs: Var, reverse: bool) -> Result<Var> {
        let n = t.shape(xs)[0];
        let hd = self.hidden;
        let pre = self.ih.forward(t, xs)?;
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut states = vec![None; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for pos in order {
            let mut g = t.slice(pre, 0, pos, 1)?;
            if let Some(hp) = h {
                let r = self.hh.forward(t, hp)?;
                g = t.add(g, r)?;
            }
            let i = t.slice(g, 1, 0, hd)?;
            let i = t.sigmoid(i);
            let f = t.slice(g, 1, hd, hd)?;
            let f = t.sigmoid(f);
            let cc = t.slice(g, 1, 2 * hd, hd)?;
            let cc = t.tanh(cc);
            let o = t.slice(g, 1, 3 * hd, hd)?;
            let o = t.sigmoid(o);
            let ic = t.mul(i, cc)?;
            let cn = match c {
                Some(cp) => {
                    let fc = t.mul(f, cp)?;
                    t.add(fc, ic)?
                }
                None => ic,
            };
            let tc = t.tanh(cn);
            let hn = t.mul(o, tc)?;
            h = Some(hn);
            c = Some(cn);
            states[pos] = Some(hn);
        }
        let rows: Vec<Var> = states.into_iter().map(|s| s.expect("every position visited")).collect();
        t.concat(&rows, 0)
    }
}

/// Xavier-uniform bound `sqrt(6 / (fan_in + fan_out))`; vectors count as one row.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fi, fo) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("rank 1 or 2"),
    };
    (6.0 / (fi + fo) as f64).sqrt()
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, so the stream for a parameter does not depend on declaration order
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Builds a store from specs, each tensor drawn from its own seeded stream.
pub fn init_store(specs: &[ParamSpec], seed: u64) -> Result<ParamStore<f32>> {
    use rand::{Rng, SeedableRng};
    let mut store = ParamStore::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let bound = xavier_bound(&spec.shape);
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            }
        };
        store.insert(&spec.name, crate::diffcore::Tensor::new(&spec.shape, data)?)?;
    }
    Ok(store)
}
