//! Cost accounting and wall-clock timing of the sparse global attention
//! against the dense baseline.
//!
//! Both methods share identical random inputs and the same local block;
//! only the global attention differs. Timings are medians over repeats
//! with the interquartile range as dispersion. The two methods are timed
//! with interleaved repeats.

use std::fmt::Write as _;
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward, init_block};
use crate::error::{Error, Result};
use crate::local_block::local_block_on_graph;
use crate::moc_attention::{assemble_context, context_length, dense_attention_on_graph, moc_attention_on_graph, MocConfig};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::router::{importance_on_graph, init_router, route_deterministic, Activation, ImportanceMatrix, RoutingDecision};
use crate::tokens::Segments;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub sigma: usize,
    pub d: usize,
    pub heads: usize,
}

impl BenchPoint {
    pub fn validate(&self) -> Result<()> {
        context_length(self.n, self.l, self.k, self.sigma)?;
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }
}

/// Default sweep: `N` in {4, 8, 16, 32} at `L = 256`, `D = 64`, `H = 4`,
/// `sigma = 8` and `k = N / 4`.
pub fn default_grid() -> Vec<BenchPoint> {
    [4, 8, 16, 32].iter().map(|&n| BenchPoint { n, l: 256, k: n / 4, sigma: 8, d: 64, heads: 4 }).collect()
}

/// Parses grid lines `N L k sigma D H` (whitespace or comma separated,
/// `#` starts a comment).
pub fn parse_grid(text: &str) -> Result<Vec<BenchPoint>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<usize> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("grid line {}: {e}", no + 1)))?;
        let [n, l, k, sigma, d, heads] = v[..] else {
            return Err(Error::InvalidArgument(format!("grid line {} needs 6 values: N L k sigma D H", no + 1)));
        };
        let p = BenchPoint { n, l, k, sigma, d, heads };
        p.validate()?;
        out.push(p);
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("empty benchmark grid".into()));
    }
    Ok(out)
}

/// Floating point operations of one global attention layer (multiply and
/// add counted separately).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopEstimate {
    /// Scores plus weighted sum: `2 * 2 * queries * keys * D` where every
    /// one of the `N (L + N_p + 1)` tokens queries its own context.
    pub moc_attention: f64,
    /// Router projections `2 * 2 * N * D^2` plus scores `2 * N^2 * D`.
    pub moc_routing: f64,
    /// `2 * 2 * (N L)^2 * D`: vecset tokens only, all-to-all.
    pub dense_attention: f64,
}

impl FlopEstimate {
    pub fn moc_total(&self) -> f64 {
        self.moc_attention + self.moc_routing
    }
}

pub fn flop_estimate(p: &BenchPoint) -> Result<FlopEstimate> {
    p.validate()?;
    let (n, l, d) = (p.n as f64, p.l as f64, p.d as f64);
    let seg = Segments::new(p.l, p.sigma)?;
    let kv = context_length(p.n, p.l, p.k, p.sigma)? as f64;
    Ok(FlopEstimate {
        moc_attention: 4.0 * n * seg.total() as f64 * kv * d,
        moc_routing: 4.0 * n * d * d + 2.0 * n * n * d,
        dense_attention: 4.0 * (n * l) * (n * l) * d,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Moc,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub sigma: usize,
    pub d: usize,
    pub heads: usize,
    /// Keys per query measured from the assembled contexts.
    pub kv_length: usize,
    pub flops_global: f64,
    pub wall_ms_local: f64,
    pub wall_ms_routing: f64,
    pub wall_ms_global: f64,
    pub wall_ms_total: f64,
    /// Interquartile range of the global attention time.
    pub iqr_ms_global: f64,
    pub repeats: usize,
    /// Set when the clock resolution exceeds 1% of a measured median.
    pub timer_warning: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { repeats: 9, warmup: 2, seed: 0 }
    }
}

/// Median and interquartile range of `xs` (linear interpolation).
pub fn median_iqr(xs: &[f64]) -> (f64, f64) {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

/// Smallest positive step of the monotonic clock observed.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

struct Timing {
    median_ms: f64,
    iqr_ms: f64,
}

/// Times two closures with their repeats interleaved, so drift in machine
/// speed during the run affects both medians alike.
fn time_pair<T>(warmup: usize, repeats: usize, mut a: impl FnMut() -> Result<T>, mut b: impl FnMut() -> Result<T>) -> Result<[Timing; 2]> {
    for _ in 0..warmup {
        std::hint::black_box(a()?);
        std::hint::black_box(b()?);
    }
    let (mut ms_a, mut ms_b) = (Vec::with_capacity(repeats), Vec::with_capacity(repeats));
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(a()?);
        ms_a.push(start.elapsed().as_secs_f64() * 1e3);
        let start = Instant::now();
        std::hint::black_box(b()?);
        ms_b.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let timing = |ms: &[f64]| {
        let (median_ms, iqr_ms) = median_iqr(ms);
        Timing { median_ms, iqr_ms }
    };
    Ok([timing(&ms_a), timing(&ms_b)])
}

fn time<T>(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<Timing> {
    for _ in 0..warmup {
        std::hint::black_box(f()?);
    }
    let mut ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(f()?);
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let (median_ms, iqr_ms) = median_iqr(&ms);
    Ok(Timing { median_ms, iqr_ms })
}

/// Random inputs and parameters of one grid point.
struct Fixture {
    p: BenchPoint,
    seg: Segments,
    params: ParamStore,
    x: Tensor,
    cond: Tensor,
    qkv: Tensor,
    importance: Tensor,
    decision: RoutingDecision,
    moc: MocConfig,
}

impl Fixture {
    fn new(p: BenchPoint, seed: u64) -> Result<Self> {
        p.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seg = Segments::new(p.l, p.sigma)?;
        let mut params = ParamStore::new();
        init_block(&mut params, "local", p.d, 4, &mut rng)?;
        init_block(&mut params, "global", p.d, 4, &mut rng)?;
        init_router(&mut params, "router", p.d, &mut rng)?;
        let x = Tensor::randn(&[p.n * seg.total(), p.d], 1.0, &mut rng);
        let cond = Tensor::randn(&[1, p.d], 1.0, &mut rng);
        let qkv = x.matmul(params.get("global.qkv.w").expect("qkv weight"))?;
        let mut g = Graph::inference();
        let o = Self::importance(&mut g, &params, &x, p, seg)?;
        let importance = g.value(o).clone();
        let decision = route_deterministic(&ImportanceMatrix::new(p.heads, p.n, importance.clone())?, p.k);
        Ok(Self { p, seg, params, x, cond, qkv, importance, decision, moc: MocConfig::default() })
    }

    fn importance(g: &mut Graph, params: &ParamStore, x: &Tensor, p: BenchPoint, seg: Segments) -> Result<Var> {
        let xv = g.constant(x.clone());
        let rows: Rc<[usize]> = (0..p.n).map(|i| i * seg.total() + seg.anchor()).collect();
        let a = g.gather_rows(xv, rows);
        importance_on_graph(g, params, "router", a, p.heads, Activation::Sigmoid)
    }

    /// Context length of every (component, head), which must all agree.
    fn measured_kv(&self) -> Result<usize> {
        let o = ImportanceMatrix::new(self.p.heads, self.p.n, self.importance.clone())?;
        let mut len = None;
        for i in 0..self.p.n {
            for h in 0..self.p.heads {
                let rows = assemble_context(i, h, self.seg, &o, &self.decision, &self.moc)?.rows.len();
                if len.is_some_and(|l| l != rows) {
                    return Err(Error::Shape(format!("context of component {i} head {h} has {rows} keys")));
                }
                len = Some(rows);
            }
        }
        Ok(len.unwrap_or(0))
    }

    fn local(&self) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(self.x.clone());
        let c = g.constant(self.cond.clone());
        let y = local_block_on_graph(&mut g, &self.params, "local", x, c, self.p.n, self.seg, self.p.heads)?;
        Ok(g.value(y).clone())
    }

    fn routing(&self) -> Result<RoutingDecision> {
        let mut g = Graph::inference();
        let o = Self::importance(&mut g, &self.params, &self.x, self.p, self.seg)?;
        Ok(route_deterministic(&ImportanceMatrix::new(self.p.heads, self.p.n, g.value(o).clone())?, self.p.k))
    }

    /// Attention only, on precomputed projections.
    fn global(&self, method: Method) -> Result<Tensor> {
        let mut g = Graph::inference();
        let qkv = g.constant(self.qkv.clone());
        let o = g.constant(self.importance.clone());
        let (p, seg) = (self.p, self.seg);
        let y = match method {
            Method::Moc => moc_attention_on_graph(&mut g, qkv, o, &self.decision, p.n, seg, p.heads, &self.moc)?,
            Method::Dense => dense_attention_on_graph(&mut g, qkv, p.n, seg, p.heads)?,
        };
        Ok(g.value(y).clone())
    }

    /// One local block followed by one full global block.
    fn pair(&self, method: Method) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(self.x.clone());
        let c = g.constant(self.cond.clone());
        let (p, seg) = (self.p, self.seg);
        let x = local_block_on_graph(&mut g, &self.params, "local", x, c, p.n, seg, p.heads)?;
        let params = &self.params;
        let y = block_forward(&mut g, params, "global", x, c, |g, h, qkv| match method {
            Method::Moc => {
                let rows: Rc<[usize]> = (0..p.n).map(|i| i * seg.total() + seg.anchor()).collect();
                let a = g.gather_rows(h, rows);
                let o = importance_on_graph(g, params, "router", a, p.heads, Activation::Sigmoid)?;
                let d = route_deterministic(&ImportanceMatrix::new(p.heads, p.n, g.value(o).clone())?, p.k);
                moc_attention_on_graph(g, qkv, o, &d, p.n, seg, p.heads, &self.moc)
            }
            Method::Dense => dense_attention_on_graph(g, qkv, p.n, seg, p.heads),
        })?;
        Ok(g.value(y).clone())
    }
}

/// Times every grid point for both methods.
pub fn bench_attention(grid: &[BenchPoint], opts: &BenchOptions, mut on_row: impl FnMut(&BenchRow)) -> Result<BenchReport> {
    if opts.repeats < 5 || opts.warmup < 2 {
        return Err(Error::InvalidArgument(format!("need at least 5 repeats and 2 warmup runs, got {} and {}", opts.repeats, opts.warmup)));
    }
    let resolution_ms = timer_resolution().as_secs_f64() * 1e3;
    let mut rows = Vec::new();
    for (idx, &p) in grid.iter().enumerate() {
        let fx = Fixture::new(p, opts.seed.wrapping_add(idx as u64))?;
        let flops = flop_estimate(&p)?;
        let local = time(opts.warmup, opts.repeats, || fx.local())?;
        let moc_routing = time(opts.warmup, opts.repeats, || fx.routing())?;
        let [moc_global, dense_global] = time_pair(opts.warmup, opts.repeats, || fx.global(Method::Moc), || fx.global(Method::Dense))?;
        let [moc_total, dense_total] = time_pair(opts.warmup, opts.repeats, || fx.pair(Method::Moc), || fx.pair(Method::Dense))?;
        for (method, routing, global, total) in [(Method::Moc, Some(moc_routing), moc_global, moc_total), (Method::Dense, None, dense_global, dense_total)] {
            let (kv_length, flops_global) = match method {
                Method::Moc => (fx.measured_kv()?, flops.moc_total()),
                Method::Dense => (p.n * p.l, flops.dense_attention),
            };
            let routing_ms = routing.as_ref().map_or(0.0, |t| t.median_ms);
            let smallest = [local.median_ms, global.median_ms, total.median_ms]
                .into_iter()
                .chain(routing.as_ref().map(|t| t.median_ms))
                .fold(f64::INFINITY, f64::min);
            let row = BenchRow {
                method,
                n: p.n,
                l: p.l,
                k: p.k,
                sigma: p.sigma,
                d: p.d,
                heads: p.heads,
                kv_length,
                flops_global,
                wall_ms_local: local.median_ms,
                wall_ms_routing: routing_ms,
                wall_ms_global: global.median_ms,
                wall_ms_total: total.median_ms,
                iqr_ms_global: global.iqr_ms,
                repeats: opts.repeats,
                timer_warning: resolution_ms > 0.01 * smallest,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(BenchReport { rows })
}

/// Global attention time ratio of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub n: usize,
    pub ratio: f64,
    /// Ratio spread from the relative IQRs of both medians; reported only.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub points: Vec<RatioPoint>,
    /// Each ratio is at most the previous one.
    pub non_increasing: bool,
    pub below_one_at_largest_n: bool,
}

impl TrendCheck {
    pub fn passed(&self) -> bool {
        self.non_increasing && self.below_one_at_largest_n
    }
}

/// Moc/dense global attention ratios ordered by `N`.
pub fn trend_check(report: &BenchReport) -> Result<TrendCheck> {
    let mut points = Vec::new();
    for m in report.rows.iter().filter(|r| r.method == Method::Moc) {
        let dense = report
            .rows
            .iter()
            .find(|r| r.method == Method::Dense && (r.n, r.l, r.d, r.heads) == (m.n, m.l, m.d, m.heads))
            .ok_or_else(|| Error::InvalidArgument(format!("no dense row for N = {}", m.n)))?;
        let ratio = m.wall_ms_global / dense.wall_ms_global;
        let rel = m.iqr_ms_global / m.wall_ms_global + dense.iqr_ms_global / dense.wall_ms_global;
        points.push(RatioPoint { n: m.n, ratio, spread: ratio * rel });
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("report has no rows".into()));
    }
    points.sort_by_key(|p| p.n);
    let non_increasing = points.windows(2).all(|w| w[1].ratio <= w[0].ratio);
    let below_one_at_largest_n = points.last().is_some_and(|p| p.ratio < 1.0);
    Ok(TrendCheck { points, non_increasing, below_one_at_largest_n })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,n,l,k,sigma,d,heads,kv_length,flops_global,wall_ms_local,wall_ms_routing,wall_ms_global,wall_ms_total,iqr_ms_global,repeats,timer_warning\n",
        );
        for r in &self.rows {
            let method = match r.method {
                Method::Moc => "moc",
                Method::Dense => "dense",
            };
            writeln!(
                out,
                "{method},{},{},{},{},{},{},{},{:.0},{:.4},{:.4},{:.4},{:.4},{:.4},{},{}",
                r.n,
                r.l,
                r.k,
                r.sigma,
                r.d,
                r.heads,
                r.kv_length,
                r.flops_global,
                r.wall_ms_local,
                r.wall_ms_routing,
                r.wall_ms_global,
                r.wall_ms_total,
                r.iqr_ms_global,
                r.repeats,
                r.timer_warning
            )
            .unwrap();
        }
        out
    }

    /// Gnuplot data: `N measured_ratio analytic_ratio`.
    pub fn ratio_data(&self) -> Result<String> {
        let trend = trend_check(self)?;
        let mut out = String::from("# N measured_ratio analytic_ratio\n");
        for p in &trend.points {
            let m = self.rows.iter().find(|r| r.method == Method::Moc && r.n == p.n).expect("moc row");
            let f = flop_estimate(&BenchPoint { n: m.n, l: m.l, k: m.k, sigma: m.sigma, d: m.d, heads: m.heads })?;
            writeln!(out, "{} {:.6} {:.6}", p.n, p.ratio, f.moc_attention / f.dense_attention).unwrap();
        }
        Ok(out)
    }
}
