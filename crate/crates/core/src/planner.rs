//! Snapped, token-aligned sliding-window geometry.
//!
//! A canvas of `S × S` pixels with patch side `p` induces a `T_base × T_base`
//! token grid (`T_base = S / p`). Window widths are restricted to even
//! divisors of `T_base` (the admissible set), windows advance by half their
//! width, and so every window corner at every scale sits on the shared token
//! grid.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("patch side must be positive")]
    ZeroPatch,
    #[error("canvas side {canvas} px is not divisible by patch side {patch} px")]
    NotDivisible { canvas: usize, patch: usize },
    #[error("minimum token width {0} must be even and at least 2")]
    BadMinWidth(usize),
    #[error("no even divisor of T_base = {base_tokens} is >= d_min = {min_width}")]
    EmptyAdmissible { base_tokens: usize, min_width: usize },
    #[error("nominal window width must be positive and finite, got {0}")]
    BadNominal(f64),
    #[error("scale {scale}: window corner at token {corner} is off the shared grid ({reason})")]
    Misaligned {
        scale: usize,
        corner: usize,
        reason: &'static str,
    },
    #[error("scale {scale}: token ({u}, {v}) is not covered by any window")]
    CoverageGap { scale: usize, u: usize, v: usize },
}

/// Canvas and patch geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridConfig {
    pub canvas_side_px: usize,
    pub patch_side_px: usize,
    pub min_token_width: usize,
}

pub const DEFAULT_MIN_TOKEN_WIDTH: usize = 8;

impl GridConfig {
    pub fn new(canvas_side_px: usize, patch_side_px: usize, min_token_width: usize) -> Result<Self, PlanError> {
        if patch_side_px == 0 {
            return Err(PlanError::ZeroPatch);
        }
        if canvas_side_px == 0 || canvas_side_px % patch_side_px != 0 {
            return Err(PlanError::NotDivisible {
                canvas: canvas_side_px,
                patch: patch_side_px,
            });
        }
        if min_token_width < 2 || min_token_width % 2 != 0 {
            return Err(PlanError::BadMinWidth(min_token_width));
        }
        Ok(Self {
            canvas_side_px,
            patch_side_px,
            min_token_width,
        })
    }

    /// `T_base = S / p`.
    pub fn base_tokens(&self) -> usize {
        self.canvas_side_px / self.patch_side_px
    }
}

/// Even divisors of `T_base` that are at least `d_min`, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdmissibleSet {
    widths: Vec<usize>,
}

impl AdmissibleSet {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn contains(&self, d: usize) -> bool {
        self.widths.binary_search(&d).is_ok()
    }
}

pub fn admissible_widths(cfg: &GridConfig) -> Result<AdmissibleSet, PlanError> {
    let base = cfg.base_tokens();
    let widths: Vec<usize> = (cfg.min_token_width..=base)
        .filter(|d| d % 2 == 0 && base % d == 0)
        .collect();
    if widths.is_empty() {
        return Err(PlanError::EmptyAdmissible {
            base_tokens: base,
            min_width: cfg.min_token_width,
        });
    }
    Ok(AdmissibleSet { widths })
}

/// Nearest admissible width to `x`; equidistant candidates resolve to the larger.
pub fn snap(x: f64, adm: &AdmissibleSet) -> usize {
    let mut best = adm.widths[0];
    let mut best_dist = (x - best as f64).abs();
    for &d in &adm.widths[1..] {
        let dist = (x - d as f64).abs();
        // ascending order: `<=` lets the larger width win ties
        if dist <= best_dist {
            best = d;
            best_dist = dist;
        }
    }
    best
}

/// Exact-arithmetic snap of the rational `num / den`.
pub fn snap_ratio(num: u64, den: u64, adm: &AdmissibleSet) -> usize {
    assert!(den > 0, "zero denominator");
    let dist = |d: usize| (num as i128 - d as i128 * den as i128).unsigned_abs();
    let mut best = adm.widths[0];
    let mut best_dist = dist(best);
    for &d in &adm.widths[1..] {
        let dd = dist(d);
        if dd <= best_dist {
            best = d;
            best_dist = dd;
        }
    }
    best
}

/// Geometry of one window scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePlan {
    pub nominal_width_px: f64,
    pub patch_side_px: usize,
    pub base_tokens: usize,
    /// `t_s`, tokens per window side.
    pub token_width: usize,
    /// `w_s = t_s · p`.
    pub window_px: usize,
    /// `τ_s = t_s / 2`.
    pub token_stride: usize,
    /// `Δ_s = τ_s · p`.
    pub pixel_stride: usize,
    /// `N_side = 2 · T_base / t_s − 1`.
    pub windows_per_side: usize,
    /// `{0, τ_s, …, T_base − t_s}`.
    pub start_positions_tok: Vec<usize>,
}

impl ScalePlan {
    /// Builds the plan for an already-snapped token width.
    pub fn from_token_width(cfg: &GridConfig, nominal_width_px: f64, token_width: usize) -> Self {
        let base = cfg.base_tokens();
        let p = cfg.patch_side_px;
        let stride = token_width / 2;
        let n_side = 2 * (base / token_width) - 1;
        Self {
            nominal_width_px,
            patch_side_px: p,
            base_tokens: base,
            token_width,
            window_px: token_width * p,
            token_stride: stride,
            pixel_stride: stride * p,
            windows_per_side: n_side,
            start_positions_tok: (0..n_side).map(|i| i * stride).collect(),
        }
    }

    pub fn window_count(&self) -> usize {
        self.windows_per_side * self.windows_per_side
    }
}

pub fn plan_scale(cfg: &GridConfig, nominal_width_px: f64) -> Result<ScalePlan, PlanError> {
    if !(nominal_width_px.is_finite() && nominal_width_px > 0.0) {
        return Err(PlanError::BadNominal(nominal_width_px));
    }
    let adm = admissible_widths(cfg)?;
    let p = cfg.patch_side_px;
    let t = if nominal_width_px.fract() == 0.0 && nominal_width_px < u64::MAX as f64 {
        snap_ratio(nominal_width_px as u64, p as u64, &adm)
    } else {
        snap(nominal_width_px / p as f64, &adm)
    };
    Ok(ScalePlan::from_token_width(cfg, nominal_width_px, t))
}

/// One window on the canvas, in pixels and tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRect {
    /// Lattice index `(i, j)`: `i` is the row, `j` the column.
    pub index: (usize, usize),
    pub top_px: usize,
    pub left_px: usize,
    pub side_px: usize,
    pub top_tok: usize,
    pub left_tok: usize,
    pub side_tok: usize,
}

/// All `N_side²` windows of a plan, row-major in `(i, j)`.
pub fn enumerate_windows(plan: &ScalePlan) -> Vec<WindowRect> {
    let n = plan.windows_per_side;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (ti, tj) = (plan.start_positions_tok[i], plan.start_positions_tok[j]);
            out.push(WindowRect {
                index: (i, j),
                top_px: ti * plan.patch_side_px,
                left_px: tj * plan.patch_side_px,
                side_px: plan.window_px,
                top_tok: ti,
                left_tok: tj,
                side_tok: plan.token_width,
            });
        }
    }
    out
}

/// Raw window-token count for one (scale, layer): `(2·T_base − t_s)²`.
pub fn token_count(plan: &ScalePlan, cfg: &GridConfig) -> usize {
    let closed = (2 * cfg.base_tokens() - plan.token_width).pow(2);
    let product = plan.window_count() * plan.token_width * plan.token_width;
    assert_eq!(closed, product, "token count identity violated for t_s = {}", plan.token_width);
    closed
}

/// Per-scale coverage summary from [`validate_cross_scale`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleCoverage {
    pub token_width: usize,
    /// Row-major `T_base × T_base` count of windows covering each token.
    pub counts: Vec<u32>,
    pub min: u32,
    pub max: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    pub base_tokens: usize,
    pub scales: Vec<ScaleCoverage>,
}

/// Checks that every window corner of every plan lands on the token grid and
/// that every token is covered at every scale.
pub fn validate_cross_scale(plans: &[ScalePlan], cfg: &GridConfig) -> Result<AlignmentReport, PlanError> {
    let base = cfg.base_tokens();
    let p = cfg.patch_side_px;
    let mut scales = Vec::with_capacity(plans.len());
    for (s, plan) in plans.iter().enumerate() {
        let t = plan.token_width;
        let tau = plan.token_stride;
        let bad = |corner, reason| PlanError::Misaligned { scale: s, corner, reason };
        if t == 0 || tau == 0 || t > base {
            return Err(bad(0, "window width or stride out of range"));
        }
        if plan.window_px != t * p || plan.pixel_stride != tau * p {
            return Err(bad(0, "pixel geometry disagrees with token geometry"));
        }
        for (k, &start) in plan.start_positions_tok.iter().enumerate() {
            if start != k * tau {
                return Err(bad(start, "start is not a multiple of the stride"));
            }
            if start + t > base {
                return Err(bad(start + t, "window runs past the canvas"));
            }
        }
        match plan.start_positions_tok.last() {
            Some(&last) if last + t == base => {}
            Some(&last) => return Err(bad(last + t, "last window does not reach the far edge")),
            None => return Err(bad(0, "no windows")),
        }
        if (base - t) % tau != 0 {
            return Err(bad(base - t, "T_base - t_s is not a multiple of the stride"));
        }

        let mut axis = vec![0u32; base];
        for &start in &plan.start_positions_tok {
            axis[start..start + t].iter_mut().for_each(|c| *c += 1);
        }
        let mut counts = Vec::with_capacity(base * base);
        for u in 0..base {
            for v in 0..base {
                let c = axis[u] * axis[v];
                if c == 0 {
                    return Err(PlanError::CoverageGap { scale: s, u, v });
                }
                counts.push(c);
            }
        }
        let min = *counts.iter().min().unwrap_or(&0);
        let max = *counts.iter().max().unwrap_or(&0);
        scales.push(ScaleCoverage {
            token_width: t,
            counts,
            min,
            max,
        });
    }
    Ok(AlignmentReport {
        base_tokens: base,
        scales,
    })
}

/// One row of the plan report.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanRow {
    pub nominal_px: f64,
    pub token_width: usize,
    pub window_px: usize,
    pub token_stride: usize,
    pub pixel_stride: usize,
    pub windows_per_side: usize,
    pub window_count: usize,
    pub token_count: usize,
}

impl PlanRow {
    pub fn new(plan: &ScalePlan, cfg: &GridConfig) -> Self {
        Self {
            nominal_px: plan.nominal_width_px,
            token_width: plan.token_width,
            window_px: plan.window_px,
            token_stride: plan.token_stride,
            pixel_stride: plan.pixel_stride,
            windows_per_side: plan.windows_per_side,
            window_count: plan.window_count(),
            token_count: token_count(plan, cfg),
        }
    }

    pub const CSV_HEADER: &'static str = "nominal_px,t_s,w_s,tau_s,delta_s,n_side,n_win,n_tok";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.nominal_px,
            self.token_width,
            self.window_px,
            self.token_stride,
            self.pixel_stride,
            self.windows_per_side,
            self.window_count,
            self.token_count
        )
    }
}

/// Plain-text table of plan rows.
pub struct PlanTable<'a>(pub &'a [PlanRow]);

impl fmt::Display for PlanTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>10} {:>5} {:>6} {:>5} {:>7} {:>6} {:>6} {:>8}",
            "nominal_px", "t_s", "w_s", "tau_s", "delta_s", "n_side", "n_win", "n_tok"
        )?;
        for r in self.0 {
            writeln!(
                f,
                "{:>10} {:>5} {:>6} {:>5} {:>7} {:>6} {:>6} {:>8}",
                r.nominal_px,
                r.token_width,
                r.window_px,
                r.token_stride,
                r.pixel_stride,
                r.windows_per_side,
                r.window_count,
                r.token_count
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_cfg() -> GridConfig {
        GridConfig::new(672, 14, 8).unwrap()
    }

    /// Independent enumeration: every d in 1..=T_base tested for evenness,
    /// divisibility and the lower bound.
    fn brute_admissible(base: usize, dmin: usize) -> Vec<usize> {
        let mut v = Vec::new();
        for d in 1..=base {
            if base % d == 0 && d % 2 == 0 && d >= dmin {
                v.push(d);
            }
        }
        v
    }

    #[test]
    fn admissible_examples() {
        assert_eq!(admissible_widths(&paper_cfg()).unwrap().widths(), &[8, 12, 16, 24, 48]);
        assert_eq!(brute_admissible(48, 8), vec![8, 12, 16, 24, 48]);
        let small = GridConfig::new(64, 16, 2).unwrap();
        assert_eq!(admissible_widths(&small).unwrap().widths(), &[2, 4]);
        let tiny = GridConfig::new(28, 14, 2).unwrap();
        assert_eq!(admissible_widths(&tiny).unwrap().widths(), &[2]);
    }

    #[test]
    fn admissible_empty_is_an_error() {
        // T_base = 5 has no even divisor
        let cfg = GridConfig::new(70, 14, 2).unwrap();
        assert!(matches!(admissible_widths(&cfg), Err(PlanError::EmptyAdmissible { .. })));
        // T_base = 4 but d_min = 8
        let cfg = GridConfig::new(64, 16, 8).unwrap();
        assert!(admissible_widths(&cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(matches!(GridConfig::new(670, 14, 8), Err(PlanError::NotDivisible { .. })));
        assert!(matches!(GridConfig::new(672, 14, 7), Err(PlanError::BadMinWidth(7))));
        assert!(matches!(GridConfig::new(672, 14, 0), Err(PlanError::BadMinWidth(0))));
        assert!(matches!(GridConfig::new(672, 0, 8), Err(PlanError::ZeroPatch)));
    }

    #[test]
    fn snap_examples() {
        let adm = admissible_widths(&paper_cfg()).unwrap();
        assert_eq!(snap(336.0 / 14.0, &adm), 24);
        assert_eq!(snap(168.0 / 14.0, &adm), 12);
        let cfg = GridConfig::new(24 * 4, 4, 8).unwrap(); // T_base = 24 -> {8, 12, 24}
        let adm = admissible_widths(&cfg).unwrap();
        assert_eq!(adm.widths(), &[8, 12, 24]);
        assert_eq!(snap(10.0, &adm), 12);
        assert_eq!(snap_ratio(10, 1, &adm), 12);
        assert_eq!(snap_ratio(40, 4, &adm), 12);
    }

    #[test]
    fn plan_examples() {
        let cfg = paper_cfg();
        let p = plan_scale(&cfg, 336.0).unwrap();
        assert_eq!(
            (p.token_width, p.token_stride, p.window_px, p.pixel_stride, p.windows_per_side),
            (24, 12, 336, 168, 3)
        );
        assert_eq!(p.start_positions_tok, vec![0, 12, 24]);
        let p = plan_scale(&cfg, 168.0).unwrap();
        assert_eq!(
            (p.token_width, p.token_stride, p.window_px, p.pixel_stride, p.windows_per_side),
            (12, 6, 168, 84, 7)
        );
        let cfg = GridConfig::new(64, 16, 2).unwrap();
        let p = plan_scale(&cfg, 64.0).unwrap();
        assert_eq!(
            (p.token_width, p.token_stride, p.window_px, p.pixel_stride, p.windows_per_side),
            (4, 2, 64, 32, 1)
        );
        assert_eq!(p.start_positions_tok, vec![0]);
        assert!(plan_scale(&cfg, 0.0).is_err());
        assert!(plan_scale(&cfg, f64::NAN).is_err());
    }

    #[test]
    fn window_enumeration() {
        let cfg = paper_cfg();
        let plan = plan_scale(&cfg, 336.0).unwrap();
        let w = enumerate_windows(&plan);
        assert_eq!(w.len(), 9);
        let mut expected = Vec::new();
        for a in [0, 12, 24] {
            for b in [0, 12, 24] {
                expected.push((a, b));
            }
        }
        assert_eq!(w.iter().map(|r| (r.top_tok, r.left_tok)).collect::<Vec<_>>(), expected);
        assert_eq!(w[4].index, (1, 1));
        assert_eq!((w[4].top_px, w[4].left_px, w[4].side_px), (168, 168, 336));
        for r in &w {
            assert!(r.top_px + r.side_px <= 672 && r.left_px + r.side_px <= 672);
        }
        assert_eq!(enumerate_windows(&plan_scale(&cfg, 168.0).unwrap()).len(), 49);
        let one = plan_scale(&cfg, 672.0).unwrap();
        let w = enumerate_windows(&one);
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].top_px, w[0].left_px), (0, 0));
    }

    #[test]
    fn token_count_examples() {
        let cfg = paper_cfg();
        assert_eq!(token_count(&plan_scale(&cfg, 336.0).unwrap(), &cfg), 5184);
        assert_eq!(9 * 576, 5184);
        assert_eq!(token_count(&plan_scale(&cfg, 168.0).unwrap(), &cfg), 7056);
        assert_eq!(49 * 144, 7056);
        let cfg = GridConfig::new(64, 16, 2).unwrap();
        assert_eq!(token_count(&plan_scale(&cfg, 64.0).unwrap(), &cfg), 16);
    }

    /// Brute-force coverage: walk every window and every token inside it.
    fn brute_coverage(plan: &ScalePlan) -> Vec<u32> {
        let base = plan.base_tokens;
        let mut c = vec![0u32; base * base];
        for r in enumerate_windows(plan) {
            for u in r.top_tok..r.top_tok + r.side_tok {
                for v in r.left_tok..r.left_tok + r.side_tok {
                    c[u * base + v] += 1;
                }
            }
        }
        c
    }

    #[test]
    fn cross_scale_validation() {
        let cfg = paper_cfg();
        let plans = vec![plan_scale(&cfg, 336.0).unwrap(), plan_scale(&cfg, 168.0).unwrap()];
        let rep = validate_cross_scale(&plans, &cfg).unwrap();
        for (sc, plan) in rep.scales.iter().zip(&plans) {
            assert_eq!(sc.counts, brute_coverage(plan));
            assert_eq!((sc.min, sc.max), (1, 4));
        }

        let full = plan_scale(&cfg, 672.0).unwrap();
        let rep = validate_cross_scale(&[full], &cfg).unwrap();
        assert!(rep.scales[0].counts.iter().all(|&c| c == 1));

        let mut broken = plan_scale(&cfg, 168.0).unwrap();
        broken.token_stride = 5;
        broken.pixel_stride = 70;
        broken.start_positions_tok = (0..=36).step_by(5).collect();
        broken.windows_per_side = broken.start_positions_tok.len();
        let err = validate_cross_scale(&[plans[0].clone(), broken], &cfg).unwrap_err();
        assert!(matches!(err, PlanError::Misaligned { scale: 1, .. }), "{err}");
    }

    #[test]
    fn plan_table_renders() {
        let cfg = paper_cfg();
        let rows: Vec<_> = [336.0, 168.0]
            .iter()
            .map(|&w| PlanRow::new(&plan_scale(&cfg, w).unwrap(), &cfg))
            .collect();
        assert_eq!(rows[0].csv(), "336,24,336,12,168,3,9,5184");
        assert_eq!(rows[1].csv(), "168,12,168,6,84,7,49,7056");
        let text = PlanTable(&rows).to_string();
        assert_eq!(text.lines().count(), 3);
    }

    fn cfg_strategy() -> impl Strategy<Value = GridConfig> {
        (1usize..=32, 1usize..=16, 1usize..=4)
            .prop_map(|(base, p, half_min)| GridConfig::new(base * 2 * p, p, 2 * half_min).unwrap())
    }

    proptest! {
        #[test]
        fn snap_idempotent(cfg in cfg_strategy()) {
            if let Ok(adm) = admissible_widths(&cfg) {
                for &d in adm.widths() {
                    prop_assert_eq!(snap(d as f64, &adm), d);
                    prop_assert_eq!(snap_ratio(d as u64 * 7, 7, &adm), d);
                }
            }
        }

        #[test]
        fn snap_monotone(cfg in cfg_strategy(), a in 0.01f64..200.0, b in 0.01f64..200.0) {
            if let Ok(adm) = admissible_widths(&cfg) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(snap(lo, &adm) <= snap(hi, &adm));
            }
        }

        #[test]
        fn plan_invariants(cfg in cfg_strategy(), nominal in 1u32..2000) {
            if let Ok(plan) = plan_scale(&cfg, nominal as f64) {
                let base = cfg.base_tokens();
                let adm = admissible_widths(&cfg).unwrap();
                prop_assert!(adm.contains(plan.token_width));
                prop_assert_eq!(plan.token_stride * 2, plan.token_width);
                prop_assert_eq!(base % plan.token_width, 0);
                prop_assert_eq!(base % plan.token_stride, 0);
                prop_assert_eq!(plan.windows_per_side, 2 * base / plan.token_width - 1);
                prop_assert_eq!(*plan.start_positions_tok.last().unwrap() + plan.token_width, base);
                prop_assert_eq!(
                    plan.window_count() * plan.token_width.pow(2),
                    (2 * base - plan.token_width).pow(2)
                );
                if base <= 64 {
                    let cov = brute_coverage(&plan);
                    prop_assert!(cov.iter().all(|&c| c >= 1));
                    let rep = validate_cross_scale(std::slice::from_ref(&plan), &cfg).unwrap();
                    prop_assert_eq!(&rep.scales[0].counts, &cov);
                }
            }
        }

        #[test]
        fn cost_decreases_with_width(cfg in cfg_strategy()) {
            if let Ok(adm) = admissible_widths(&cfg) {
                let counts: Vec<usize> = adm
                    .widths()
                    .iter()
                    .map(|&t| token_count(&ScalePlan::from_token_width(&cfg, 0.0, t), &cfg))
                    .collect();
                prop_assert!(counts.windows(2).all(|w| w[0] > w[1]));
            }
        }
    }
}
