//! Dimensional steering adapters: `M + Σ_d ε_d · M·W_dᵀ` on a chosen layer's output.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::Dimension;
use crate::error::{Error, Result};
use crate::model::SteerHook;

/// Steering gains `(ε_n, ε_f, ε_e)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    pub n: f64,
    pub f: f64,
    pub e: f64,
}

impl ControlVector {
    pub fn new(n: f64, f: f64, e: f64) -> Self {
        Self { n, f, e }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn ones() -> Self {
        Self::new(1.0, 1.0, 1.0)
    }

    /// Unit gain on `dim`, zero elsewhere.
    pub fn only(dim: Dimension) -> Self {
        let mut cv = Self::zero();
        cv.set(dim, 1.0);
        cv
    }

    pub fn get(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Novelty => self.n,
            Dimension::Feasibility => self.f,
            Dimension::Effectiveness => self.e,
        }
    }

    pub fn set(&mut self, dim: Dimension, v: f64) {
        match dim {
            Dimension::Novelty => self.n = v,
            Dimension::Feasibility => self.f = v,
            Dimension::Effectiveness => self.e = v,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.n, self.f, self.e]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Checks every gain lies in `[0, eps_max]`.
    pub fn validate(&self, eps_max: f64) -> Result<()> {
        for v in self.as_array() {
            if !(0.0..=eps_max).contains(&v) {
                return Err(Error::InvalidArgument(format!("gain {v} outside [0, {eps_max}]")));
            }
        }
        Ok(())
    }
}

/// Parses `N,F,E`.
impl std::str::FromStr for ControlVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("control vector `{s}`: {e}")))?;
        match parts.as_slice() {
            [n, f, e] if parts.iter().all(|v| v.is_finite() && *v >= 0.0) => Ok(Self::new(*n, *f, *e)),
            _ => Err(Error::InvalidArgument(format!("control vector `{s}` needs three non-negative gains"))),
        }
    }
}

/// One dimension's steering matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SteerAdapter {
    pub dimension: Dimension,
    pub attach_layers: BTreeSet<usize>,
    pub w: Array2<f64>,
    /// Rank factors `(U, V)` with `W = U·Vᵀ`, when the adapter was built from them.
    pub factors: Option<(Array2<f64>, Array2<f64>)>,
    pub trained: bool,
}

impl SteerAdapter {
    /// Zero matrix attached to `attach_layers`.
    pub fn zeros(dimension: Dimension, width: usize, attach_layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            dimension,
            attach_layers: attach_layers.into_iter().collect(),
            w: Array2::zeros((width, width)),
            factors: None,
            trained: false,
        }
    }

    /// Adapter whose matrix is `U·Vᵀ` for `width × r` factors.
    pub fn low_rank(
        dimension: Dimension,
        u: Array2<f64>,
        v: Array2<f64>,
        attach_layers: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        if u.dim() != v.dim() || u.ncols() > u.nrows() {
            return Err(Error::Shape(format!("rank factors {:?} and {:?}", u.dim(), v.dim())));
        }
        Ok(Self {
            dimension,
            attach_layers: attach_layers.into_iter().collect(),
            w: u.dot(&v.t()),
            factors: Some((u, v)),
            trained: false,
        })
    }

    pub fn width(&self) -> usize {
        self.w.nrows()
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.w.nrows() != self.w.ncols() {
            return Err(Error::Shape(format!("steering matrix {:?} is not square", self.w.dim())));
        }
        if let Some(&l) = self.attach_layers.iter().find(|&&l| l >= layers) {
            return Err(Error::InvalidArgument(format!("attach layer {l} outside a {layers}-layer model")));
        }
        if self.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite entry in the {} steering matrix", self.dimension)));
        }
        Ok(())
    }
}

fn check_width(m: &Array2<f64>, a: &SteerAdapter) -> Result<()> {
    if m.ncols() != a.width() {
        return Err(Error::Shape(format!(
            "activation width {} vs {} adapter width {}",
            m.ncols(),
            a.dimension,
            a.width()
        )));
    }
    Ok(())
}

/// `M + ε · M·Wᵀ`; `ε = 0` returns a copy of `M` with no arithmetic.
pub fn apply_single(m: &Array2<f64>, adapter: &SteerAdapter, eps: f64) -> Result<Array2<f64>> {
    check_width(m, adapter)?;
    if eps == 0.0 {
        return Ok(m.clone());
    }
    Ok(m + &(m.dot(&adapter.w.t()) * eps))
}

/// The three adapters of a steered model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub adapters: Vec<SteerAdapter>,
}

impl AdapterSet {
    /// Zero-initialized N, F and E adapters on `attach_layers`.
    pub fn zeros(width: usize, attach_layers: &[usize]) -> Self {
        Self {
            adapters: Dimension::ALL
                .iter()
                .map(|&d| SteerAdapter::zeros(d, width, attach_layers.iter().copied()))
                .collect(),
        }
    }

    pub fn get(&self, dim: Dimension) -> Option<&SteerAdapter> {
        self.adapters.iter().find(|a| a.dimension == dim)
    }

    pub fn get_mut(&mut self, dim: Dimension) -> Option<&mut SteerAdapter> {
        self.adapters.iter_mut().find(|a| a.dimension == dim)
    }

    pub fn require(&self, dim: Dimension) -> Result<&SteerAdapter> {
        self.get(dim)
            .ok_or_else(|| Error::Missing(format!("{} steering adapter", dim.name())))
    }

    /// Union of the adapters' attach layers.
    pub fn attach_layers(&self) -> BTreeSet<usize> {
        self.adapters.iter().flat_map(|a| a.attach_layers.iter().copied()).collect()
    }

    pub fn write_into(&self, ck: &mut Checkpoint) {
        let meta: Vec<Value> = self
            .adapters
            .iter()
            .map(|a| {
                json!({
                    "dimension": a.dimension,
                    "attach_layers": a.attach_layers,
                    "trained": a.trained,
                })
            })
            .collect();
        ck.set("steer", Value::from(meta));
        for a in &self.adapters {
            ck.slices.push((format!("steer.{}.W", a.dimension.tag()), a.w.clone()));
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            msg,
        };
        #[derive(Deserialize)]
        struct Meta {
            dimension: Dimension,
            attach_layers: BTreeSet<usize>,
            trained: bool,
        }
        let meta: Vec<Meta> = serde_json::from_value(ck.get("steer").cloned().ok_or_else(|| fail("no steering metadata".into()))?)
            .map_err(|e| fail(format!("steering metadata: {e}")))?;
        let mut adapters = Vec::new();
        for m in meta {
            let name = format!("steer.{}.W", m.dimension.tag());
            let w = ck.slice(&name).ok_or_else(|| fail(format!("missing slice {name}")))?;
            adapters.push(SteerAdapter {
                dimension: m.dimension,
                attach_layers: m.attach_layers,
                w: w.clone(),
                factors: None,
                trained: m.trained,
            });
        }
        Ok(Self { adapters })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.set("kind", Value::from("steer"));
        self.write_into(&mut ck);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// `M + Σ_d ε_d · M·W_dᵀ` over all three dimensions. Zero gains contribute no arithmetic.
pub fn apply_combined(m: &Array2<f64>, adapters: &AdapterSet, cv: &ControlVector) -> Result<Array2<f64>> {
    let mut out = m.clone();
    for dim in Dimension::ALL {
        let a = adapters.require(dim)?;
        check_width(m, a)?;
        let eps = cv.get(dim);
        if eps != 0.0 {
            out = out + m.dot(&a.w.t()) * eps;
        }
    }
    Ok(out)
}

/// Hook applying [`apply_combined`] with fixed gains on the adapters' attach layers.
#[derive(Clone, Copy, Debug)]
pub struct CombinedHook<'a> {
    pub adapters: &'a AdapterSet,
    pub cv: ControlVector,
}

pub fn make_hook(adapters: &AdapterSet, cv: ControlVector) -> CombinedHook<'_> {
    CombinedHook { adapters, cv }
}

impl SteerHook for CombinedHook<'_> {
    fn attaches(&self, layer: usize) -> bool {
        self.adapters.adapters.iter().any(|a| a.attach_layers.contains(&layer))
    }

    fn apply(&self, layer: usize, m: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = m.clone();
        for a in self.adapters.adapters.iter().filter(|a| a.attach_layers.contains(&layer)) {
            check_width(m, a)?;
            let eps = self.cv.get(a.dimension);
            if eps != 0.0 {
                out = out + m.dot(&a.w.t()) * eps;
            }
        }
        Ok(out)
    }

    fn apply_tape(&self, tape: &mut Tape, layer: usize, m: Var) -> Result<Var> {
        let terms: Vec<(Var, f64)> = self
            .adapters
            .adapters
            .iter()
            .filter(|a| a.attach_layers.contains(&layer) && self.cv.get(a.dimension) != 0.0)
            .map(|a| (tape.constant(a.w.clone()), self.cv.get(a.dimension)))
            .collect();
        steer_tape(tape, m, &terms)
    }
}

/// Records `M + Σ ε·M·Wᵀ` for the given `(W, ε)` terms.
pub fn steer_tape(tape: &mut Tape, m: Var, terms: &[(Var, f64)]) -> Result<Var> {
    let mut out = m;
    for &(w, eps) in terms {
        let delta = tape.matmul_t(m, w)?;
        let delta = tape.scale(delta, eps);
        out = tape.add(out, delta)?;
    }
    Ok(out)
}

/// Hook whose steering matrices already live on a tape, typically as trainable leaves.
/// It only supports recorded evaluation.
#[derive(Clone, Debug)]
pub struct TapeHook {
    pub attach_layers: BTreeSet<usize>,
    pub terms: Vec<(Var, f64)>,
}

impl SteerHook for TapeHook {
    fn attaches(&self, layer: usize) -> bool {
        self.attach_layers.contains(&layer)
    }

    fn apply(&self, _layer: usize, _m: &Array2<f64>) -> Result<Array2<f64>> {
        Err(Error::InvalidArgument("tape hook evaluated outside a tape".into()))
    }

    fn apply_tape(&self, tape: &mut Tape, _layer: usize, m: Var) -> Result<Var> {
        steer_tape(tape, m, &self.terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gain_is_identity_and_identity_matrix_doubles() {
        let m = array![[1.0, -2.0], [0.5, 3.0]];
        let mut a = SteerAdapter::zeros(Dimension::Novelty, 2, [0]);
        a.w = array![[3.0, 1.0], [-1.0, 2.0]];
        assert_eq!(apply_single(&m, &a, 0.0).unwrap(), m);
        a.w = Array2::eye(2);
        assert_eq!(apply_single(&m, &a, 1.0).unwrap(), &m * 2.0);
        assert!(apply_single(&array![[1.0]], &a, 1.0).is_err());
    }

    #[test]
    fn combined_identity_quadruples_and_requires_all() {
        let m = array![[1.0, -2.0], [0.5, 3.0]];
        let mut set = AdapterSet::zeros(2, &[0]);
        for a in &mut set.adapters {
            a.w = Array2::eye(2);
        }
        assert_eq!(apply_combined(&m, &set, &ControlVector::ones()).unwrap(), &m * 4.0);
        assert_eq!(apply_combined(&m, &set, &ControlVector::zero()).unwrap(), m);
        set.adapters.pop();
        assert!(matches!(apply_combined(&m, &set, &ControlVector::ones()), Err(Error::Missing(_))));
    }

    #[test]
    fn control_vector_parsing() {
        let cv: ControlVector = "1,0.5, 2".parse().unwrap();
        assert_eq!(cv, ControlVector::new(1.0, 0.5, 2.0));
        assert!("1,2".parse::<ControlVector>().is_err());
        assert!("1,-2,0".parse::<ControlVector>().is_err());
    }

    #[test]
    fn low_rank_reproduces_matrix() {
        let u = array![[1.0], [2.0], [0.0]];
        let v = array![[0.5], [-1.0], [3.0]];
        let a = SteerAdapter::low_rank(Dimension::Feasibility, u.clone(), v.clone(), [1]).unwrap();
        let full = u.dot(&v.t());
        for (x, y) in a.w.iter().zip(full.iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}
