use std::rc::Rc;

use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Constant fill.
    Const(f64),
    /// Glorot/Xavier uniform over (fan_in, fan_out).
    Glorot,
    /// N(0, scale^2) entries.
    Normal(f64),
}

/// Named parameter tensors plus their accumulated training state ordering.
///
/// Values are reference-counted so a training-step graph can alias them
/// without copying; updates happen between steps when no graph is alive.
#[derive(Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Rc<Vec<f64>>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut CounterRng) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Glorot => {
                let (fan_in, fan_out) = match shape.len() {
                    1 => (shape[0], shape[0]),
                    2 => (shape[0], shape[1]),
                    _ => {
                        let last = shape[shape.len() - 1];
                        (n / last, last)
                    }
                };
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.uniform_range(-s, s)).collect()
            }
            Init::Normal(scale) => (0..n).map(|_| rng.gaussian() * scale).collect(),
        };
        let id = ParamId(self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.values.push(Rc::new(values));
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Rc<Vec<f64>> {
        Rc::clone(&self.values[id.0])
    }

    /// In-place update; clones only if a graph still aliases the buffer.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut [f64])) {
        let buf: &mut Vec<f64> = Rc::make_mut(&mut self.values[id.0]);
        f(buf.as_mut_slice());
    }

    pub fn set(&mut self, id: ParamId, values: Vec<f64>) {
        assert_eq!(
            values.len(),
            self.shapes[id.0].iter().product::<usize>(),
            "set: wrong length for {}",
            self.names[id.0]
        );
        self.values[id.0] = Rc::new(values);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &[usize], &[f64])> {
        (0..self.names.len()).map(move |i| {
            (
                ParamId(i),
                self.names[i].as_str(),
                self.shapes[i].as_slice(),
                self.values[i].as_slice(),
            )
        })
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// FNV-1a over the raw f64 bits of every parameter, in declaration order.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for values in &self.values {
            for v in values.iter() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}
