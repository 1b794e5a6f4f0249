//! Parameter and multiply-accumulate accounting.
//!
//! Two independent sources: closed-form formulas for token mixers, and an
//! exact count obtained by walking a built model through [`CostGraph`],
//! which tracks shapes only. One multiply-accumulate (MAC) is counted per
//! weight use of a linear layer; normalization, activations, residual adds,
//! pooling, resampling and rearrangement are free.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, Resolution, TokenMixing};
use crate::params::Parameters;
use crate::rearrange::RearrangeSpec;
use crate::tensor::{Float, Tensor, UnfoldGeometry};

/// Parameters of a conventional token-mixing MLP pair over `s = h'w'`
/// tokens with hidden width `e·s`, biases included: `s(2es + e + 1)`.
pub fn token_mixing_params_analytic(h: u64, w: u64, e: u64) -> u128 {
    let s = (h * w) as u128;
    let e = e as u128;
    s * (2 * e * s + e + 1)
}

fn mlp_pair(s: u128, e: u128) -> u128 {
    s * (2 * e * s + e + 1)
}

/// Parameters of the two MLP pairs of a raft-token-mixing block:
/// `h'r(2e·h'r + e + 1) + w'r(2e·w'r + e + 1)`.
pub fn raft_mixing_params_analytic(h: u64, w: u64, e: u64, r: u64) -> u128 {
    raft_mixing_params_analytic_split(h, w, e, e, r)
}

/// [`raft_mixing_params_analytic`] with separate vertical and horizontal
/// expansion factors.
pub fn raft_mixing_params_analytic_split(h: u64, w: u64, e_ver: u64, e_hor: u64, r: u64) -> u128 {
    let (h, w, r) = (h as u128, w as u128, r as u128);
    mlp_pair(h * r, e_ver as u128) + mlp_pair(w * r, e_hor as u128)
}

/// `e(h'w')⁴`.
pub fn token_mixing_macs_analytic(h: u64, w: u64, e: u64) -> u128 {
    (e as u128) * ((h * w) as u128).pow(4)
}

/// `e·r⁴(h'⁴ + w'⁴)`.
pub fn raft_mixing_macs_analytic(h: u64, w: u64, e: u64, r: u64) -> u128 {
    (e as u128) * (r as u128).pow(4) * ((h as u128).pow(4) + (w as u128).pow(4))
}

/// Raft-token-mixing needs fewer parameters than dense token mixing by the
/// leading terms: `r²(h'² + w'²) < (h'w')²`, i.e. `2r² < h'²` when square.
pub fn params_advantage(h: u64, w: u64, r: u64) -> bool {
    let (h, w, r) = (h as u128, w as u128, r as u128);
    r * r * (h * h + w * w) < (h * w).pow(2)
}

/// The printed MAC formulas favour rafts: `r⁴(h'⁴ + w'⁴) < (h'w')⁴`, i.e.
/// `2r⁴ < h'⁴` when square.
pub fn macs_advantage(h: u64, w: u64, r: u64) -> bool {
    let (h, w, r) = (h as u128, w as u128, r as u128);
    r.pow(4) * (h.pow(4) + w.pow(4)) < (h * w).pow(4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakevenRow {
    pub r: u64,
    pub token_params: u128,
    pub raft_params: u128,
    pub params_ratio: f64,
    pub token_macs: u128,
    pub raft_macs: u128,
    pub macs_ratio: f64,
    pub params_advantage: bool,
    pub macs_advantage: bool,
}

/// Analytic comparison of both token mixers for each raft size.
pub fn breakeven_report(h: u64, w: u64, e: u64, rs: impl IntoIterator<Item = u64>) -> Result<Vec<BreakevenRow>> {
    if h == 0 || w == 0 || e == 0 {
        return Err(Error::invalid(
            "breakeven_report",
            "grid and expansion must be positive",
        ));
    }
    let token_params = token_mixing_params_analytic(h, w, e);
    let token_macs = token_mixing_macs_analytic(h, w, e);
    rs.into_iter()
        .map(|r| {
            if r == 0 {
                return Err(Error::invalid("breakeven_report", "raft size must be positive"));
            }
            let raft_params = raft_mixing_params_analytic(h, w, e, r);
            let raft_macs = raft_mixing_macs_analytic(h, w, e, r);
            Ok(BreakevenRow {
                r,
                token_params,
                raft_params,
                params_ratio: raft_params as f64 / token_params as f64,
                token_macs,
                raft_macs,
                macs_ratio: raft_macs as f64 / token_macs as f64,
                params_advantage: params_advantage(h, w, r),
                macs_advantage: macs_advantage(h, w, r),
            })
        })
        .collect()
}

/// Shape-only [`Graph`] that tallies MACs per named scope.
#[derive(Debug, Default)]
pub struct CostGraph {
    scopes: RefCell<Vec<String>>,
    macs: RefCell<BTreeMap<String, u64>>,
}

/// Scope that collects MACs issued outside any named scope.
pub const UNSCOPED: &str = "(unscoped)";

impl CostGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn charge(&self, macs: u64) {
        let scope = self
            .scopes
            .borrow()
            .last()
            .cloned()
            .unwrap_or_else(|| UNSCOPED.to_string());
        *self.macs.borrow_mut().entry(scope).or_default() += macs;
    }

    /// MACs charged to each scope.
    pub fn macs(&self) -> BTreeMap<String, u64> {
        self.macs.borrow().clone()
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.borrow().values().sum()
    }
}

fn rows_of(shape: &[usize]) -> u64 {
    shape[..shape.len().saturating_sub(1)].iter().product::<usize>() as u64
}

impl<T: Float> Graph<T> for CostGraph {
    type Value = Vec<usize>;

    fn param(&self, t: &Tensor<T>) -> Vec<usize> {
        t.shape().to_vec()
    }

    fn input(&self, t: &Tensor<T>) -> Vec<usize> {
        t.shape().to_vec()
    }

    fn shape(&self, v: &Vec<usize>) -> Vec<usize> {
        v.clone()
    }

    fn reshape(&self, v: &Vec<usize>, shape: &[usize]) -> Result<Vec<usize>> {
        if v.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", v, shape));
        }
        Ok(shape.to_vec())
    }

    fn add(&self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a != b {
            return Err(Error::shape("add", a, b));
        }
        Ok(a.clone())
    }

    fn matmul(&self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", a, b));
        }
        self.charge((a[0] * a[1] * b[1]) as u64);
        Ok(vec![a[0], b[1]])
    }

    fn linear(&self, x: &Vec<usize>, weight: &Vec<usize>, bias: &Vec<usize>) -> Result<Vec<usize>> {
        if x.is_empty() || weight.len() != 2 || x[x.len() - 1] != weight[0] || bias[..] != [weight[1]] {
            return Err(Error::shape("linear", x, weight));
        }
        self.charge(rows_of(x) * (weight[0] * weight[1]) as u64);
        let mut out = x.clone();
        *out.last_mut().expect("non-empty") = weight[1];
        Ok(out)
    }

    fn layer_norm(&self, x: &Vec<usize>, gamma: &Vec<usize>, beta: &Vec<usize>, _eps: f64) -> Result<Vec<usize>> {
        if x.last() != gamma.first() || gamma != beta || gamma.len() != 1 {
            return Err(Error::shape("layer_norm", x, gamma));
        }
        Ok(x.clone())
    }

    fn gelu(&self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn rearrange(&self, x: &Vec<usize>, spec: &RearrangeSpec) -> Result<Vec<usize>> {
        Ok(spec.resolve(x)?.out_shape().to_vec())
    }

    fn concat(&self, xs: &[Vec<usize>], axis: usize) -> Result<Vec<usize>> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for s in xs {
            let same = s.len() == first.len() && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", first, s));
            }
            out[axis] += s[axis];
        }
        Ok(out)
    }

    fn unfold(&self, x: &Vec<usize>, kernel: usize, stride: usize, padding: usize) -> Result<Vec<usize>> {
        if x.len() != 3 {
            return Err(Error::invalid("unfold", format!("expected [c, h, w], got {x:?}")));
        }
        let g = UnfoldGeometry::new(x[0], x[1], x[2], kernel, stride, padding)?;
        Ok(vec![g.rows(), g.tokens()])
    }

    fn global_avg_pool(&self, x: &Vec<usize>) -> Result<Vec<usize>> {
        if x.len() != 2 {
            return Err(Error::invalid(
                "global_avg_pool",
                format!("expected [tokens, c], got {x:?}"),
            ));
        }
        Ok(vec![x[1]])
    }

    fn bicubic_resize(&self, x: &Vec<usize>, out_h: usize, out_w: usize) -> Result<Vec<usize>> {
        if x.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid(
                "bicubic_resize",
                format!("cannot resize {x:?} to {out_h}x{out_w}"),
            ));
        }
        Ok(vec![x[0], out_h, out_w])
    }

    fn enter(&self, name: &str) {
        self.scopes.borrow_mut().push(name.to_string());
    }

    fn exit(&self) {
        self.scopes.borrow_mut().pop();
    }
}

/// Stored scalars per module, in forward order.
pub fn count_params_exact<T: Float>(model: &Model<T>) -> Vec<(String, u64)> {
    let named = model.named_parameters();
    model
        .module_names()
        .into_iter()
        .map(|m| {
            let prefix = format!("{m}.");
            let n = named
                .iter()
                .filter(|(name, _)| name.starts_with(&prefix))
                .map(|(_, t)| t.len() as u64)
                .sum();
            (m, n)
        })
        .collect()
}

/// MACs per module for one forward pass at `(h, w)`. Inputs other than the
/// training resolution are costed through the resolution adapter.
pub fn count_macs_exact<T: Float>(model: &Model<T>, resolution: (usize, usize)) -> Result<Vec<(String, u64)>> {
    let g = CostGraph::new();
    let image = vec![model.config.in_channels, resolution.0, resolution.1];
    let mode = if resolution == model.config.resolution {
        Resolution::Strict
    } else {
        Resolution::Adapt
    };
    model.forward_graph(&g, &image, mode)?;
    let mut macs = g.macs();
    let mut rows: Vec<(String, u64)> = model
        .module_names()
        .into_iter()
        .map(|m| {
            let n = macs.remove(&m).unwrap_or(0);
            (m, n)
        })
        .collect();
    rows.extend(macs);
    Ok(rows)
}

/// How MACs are turned into reported FLOPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopsConvention {
    /// One multiply-accumulate counts as one FLOP.
    Macs,
    /// One multiply-accumulate counts as two FLOPs.
    #[serde(rename = "2macs")]
    TwoMacs,
}

impl FlopsConvention {
    pub fn factor(self) -> u64 {
        match self {
            FlopsConvention::Macs => 1,
            FlopsConvention::TwoMacs => 2,
        }
    }
}

impl FromStr for FlopsConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macs" => Ok(FlopsConvention::Macs),
            "2macs" => Ok(FlopsConvention::TwoMacs),
            _ => Err(Error::invalid(
                "flops_convention",
                format!("unknown convention {s:?}; use macs or 2macs"),
            )),
        }
    }
}

impl fmt::Display for FlopsConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlopsConvention::Macs => "macs",
            FlopsConvention::TwoMacs => "2macs",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// Closed-form parameter count of the token mixer's MLPs (layer norms
    /// excluded), where a formula applies.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub params_analytic: Option<u128>,
    /// Printed closed-form MAC expression, where one applies.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub macs_analytic: Option<u128>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub config: crate::model::ModelConfig,
    pub resolution: (usize, usize),
    pub flops_convention: FlopsConvention,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn new<T: Float>(model: &Model<T>, resolution: (usize, usize), convention: FlopsConvention) -> Result<Self> {
        let params: BTreeMap<String, u64> = count_params_exact(model).into_iter().collect();
        let grids = model.config.grids()?;
        let mut rows = Vec::new();
        for (name, macs) in count_macs_exact(model, resolution)? {
            let (params_analytic, macs_analytic) = analytic_columns(model, &grids, &name);
            rows.push(CostRow {
                params: params.get(&name).copied().unwrap_or(0),
                name,
                macs,
                params_analytic,
                macs_analytic,
            });
        }
        let params_total = rows.iter().map(|r| r.params).sum();
        let macs_total: u64 = rows.iter().map(|r| r.macs).sum();
        Ok(CostReport {
            model: model.config.name.clone(),
            config: model.config.clone(),
            resolution,
            flops_convention: convention,
            rows,
            totals: CostTotals {
                params: params_total,
                macs: macs_total,
                flops: macs_total * convention.factor(),
            },
        })
    }

    /// Totals agree with the rows.
    pub fn is_consistent(&self) -> bool {
        self.totals.params == self.rows.iter().map(|r| r.params).sum::<u64>()
            && self.totals.macs == self.rows.iter().map(|r| r.macs).sum::<u64>()
            && self.totals.flops == self.totals.macs * self.flops_convention.factor()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::invalid("cost_report", e.to_string()))
    }
}

fn analytic_columns<T: Float>(
    model: &Model<T>,
    grids: &[crate::tensor::PatchGrid],
    name: &str,
) -> (Option<u128>, Option<u128>) {
    let parts: Vec<&str> = name.split('.').collect();
    let ["levels", l, "blocks", _, "token"] = parts[..] else {
        return (None, None);
    };
    let Ok(l) = l.parse::<usize>() else { return (None, None) };
    let (Some(level), Some(grid)) = (model.config.levels.get(l), grids.get(l)) else {
        return (None, None);
    };
    let (h, w) = (grid.h_prime as u64, grid.w_prime as u64);
    match level.token_mixing {
        TokenMixing::Raft {
            raft_size,
            e_ver,
            e_hor,
        } => {
            let r = raft_size as u64;
            let params = raft_mixing_params_analytic_split(h, w, e_ver as u64, e_hor as u64, r);
            let macs = (e_ver == e_hor).then(|| raft_mixing_macs_analytic(h, w, e_ver as u64, r));
            (Some(params), macs)
        }
        TokenMixing::Dense { hidden } => {
            let s = grid.tokens();
            if hidden % s != 0 {
                return (None, None);
            }
            let e = (hidden / s) as u64;
            (
                Some(token_mixing_params_analytic(h, w, e)),
                Some(token_mixing_macs_analytic(h, w, e)),
            )
        }
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "model {} at {}x{} (flops convention: {})",
            self.model, self.resolution.0, self.resolution.1, self.flops_convention
        )?;
        writeln!(
            f,
            "{:<32} {:>12} {:>16} {:>14}",
            "module", "params", "macs", "params(formula)"
        )?;
        for r in &self.rows {
            let analytic = r.params_analytic.map_or_else(|| "-".to_string(), |v| v.to_string());
            writeln!(f, "{:<32} {:>12} {:>16} {:>14}", r.name, r.params, r.macs, analytic)?;
        }
        writeln!(
            f,
            "total params {} ({:.3} M)",
            self.totals.params,
            self.totals.params as f64 / 1e6
        )?;
        writeln!(
            f,
            "total macs {} ({:.3} G)",
            self.totals.macs,
            self.totals.macs as f64 / 1e9
        )?;
        write!(
            f,
            "total flops {} ({:.3} G)",
            self.totals.flops,
            self.totals.flops as f64 / 1e9
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::MixingParams;
    use crate::graph::Eager;
    use crate::init::{InitScheme, Initializer};
    use crate::model::{tiny_config, Preset};
    use crate::nn::LinearParams;

    #[test]
    fn formula_examples() {
        assert_eq!(token_mixing_params_analytic(4, 4, 2), 1072);
        assert_eq!(token_mixing_params_analytic(1, 1, 1), 4);
        assert_eq!(raft_mixing_params_analytic(4, 4, 2, 2), 560);
        assert_eq!(token_mixing_macs_analytic(2, 2, 1), 256);
        assert_eq!(raft_mixing_macs_analytic(2, 2, 1, 1), 32);
        assert_eq!(raft_mixing_params_analytic(5, 5, 3, 1), 2 * mlp_pair(5, 3));
    }

    #[test]
    fn token_formula_matches_constructed_mlp() {
        let mut init = Initializer::new(InitScheme::Zeros, 0);
        for e in [1u64, 2, 4] {
            let s = 196;
            let p: MixingParams<f32> = MixingParams::init(&mut init, 1, s, e as usize * s).unwrap();
            let mlp = p.fc1.num_scalars() + p.fc2.num_scalars();
            assert_eq!(mlp as u128, token_mixing_params_analytic(14, 14, e));
        }
    }

    #[test]
    fn breakeven_thresholds() {
        assert!(params_advantage(14, 14, 2));
        assert!(params_advantage(14, 14, 9));
        assert!(!params_advantage(14, 14, 10));
        let rows = breakeven_report(14, 14, 2, 1..=12).unwrap();
        for row in &rows {
            let ratio = 2.0 * (row.r as f64 / 14.0).powi(4);
            assert!((row.macs_ratio - ratio).abs() < 1e-12);
            assert_eq!(
                row.raft_macs * 14u128.pow(4),
                2 * (row.r as u128).pow(4) * row.token_macs
            );
        }
        assert!(breakeven_report(14, 14, 2, [0]).is_err());
    }

    #[test]
    fn predicates_are_strict() {
        // 2r² = h'² has no integer solution; check the strict square forms.
        assert!(!params_advantage(1, 1, 1));
        assert!(!macs_advantage(1, 1, 1));
        for h in 1..20u64 {
            for r in 1..20u64 {
                assert_eq!(params_advantage(h, h, r), 2 * r * r < h * h);
                assert_eq!(macs_advantage(h, h, r), 2 * r.pow(4) < h.pow(4));
            }
        }
    }

    #[test]
    fn single_linear_macs() {
        let g = CostGraph::new();
        let p = LinearParams::<f32>::zeros(4, 8).unwrap();
        let x = vec![7, 4];
        let y = Graph::<f32>::linear(
            &g,
            &x,
            &Graph::<f32>::param(&g, &p.weight),
            &Graph::<f32>::param(&g, &p.bias),
        )
        .unwrap();
        assert_eq!(y, [7, 8]);
        assert_eq!(g.total_macs(), 224);
        assert_eq!(p.num_scalars(), 40);
    }

    #[test]
    fn cost_graph_tracks_eager_shapes() {
        let model = crate::model::Model::<f64>::build(tiny_config(10, 0), InitScheme::Dense { std: 0.1 }).unwrap();
        let img = Tensor::zeros([3, 32, 32]).unwrap();
        let eager = model.forward_graph(&Eager, &img, Resolution::Strict).unwrap();
        let cost = model
            .forward_graph(&CostGraph::new(), &vec![3, 32, 32], Resolution::Strict)
            .unwrap();
        assert_eq!(cost.logits, eager.logits.shape());
        for ((c, _), (e, _)) in cost.levels.iter().zip(&eager.levels) {
            assert_eq!(c, e.shape());
        }
    }

    #[test]
    fn tiny_macs_by_hand() {
        let model = crate::model::Model::<f32>::build(tiny_config(10, 0), InitScheme::Zeros).unwrap();
        let rows: BTreeMap<String, u64> = count_macs_exact(&model, (32, 32)).unwrap().into_iter().collect();
        // Level 0: 8x8 grid, 3 channels in, features 3·(16 + 64) = 240 -> 8.
        assert_eq!(rows["levels.0.embed"], 64 * 240 * 8);
        // Raft r=2, o=4: vertical sites o·w' = 32, 16 -> 32 -> 16; the
        // horizontal direction is the same on a square grid.
        assert_eq!(rows["levels.0.blocks.0.token"], 2 * 2 * (32 * 16 * 32));
        assert_eq!(rows["levels.0.blocks.0.channel"], 64 * 8 * 32 * 2);
        // Level 1: 4x4 grid, features 8·4 = 32 -> 16.
        assert_eq!(rows["levels.1.embed"], 16 * 32 * 16);
        // o=8, sites 8·4 = 32, 8 -> 16 -> 8.
        assert_eq!(rows["levels.1.blocks.0.token"], 2 * 2 * (32 * 8 * 16));
        assert_eq!(rows["head"], 160);
        assert!(!rows.contains_key(UNSCOPED));
    }

    #[test]
    fn report_is_consistent_and_roundtrips() {
        let model = crate::model::Model::<f32>::build(tiny_config(10, 0), InitScheme::Zeros).unwrap();
        let report = CostReport::new(&model, (32, 32), FlopsConvention::TwoMacs).unwrap();
        assert!(report.is_consistent());
        assert_eq!(report.totals.params as usize, model.num_scalars());
        let back = CostReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
        assert!(report.to_string().contains("total params"));
    }

    #[test]
    fn params_independent_of_seed() {
        let a = crate::model::Model::<f32>::build(tiny_config(10, 1), InitScheme::DEFAULT).unwrap();
        let b = crate::model::Model::<f32>::build(tiny_config(10, 2), InitScheme::DEFAULT).unwrap();
        assert_eq!(count_params_exact(&a), count_params_exact(&b));
        assert!("raftmlp-s".parse::<Preset>().is_ok());
    }
}
