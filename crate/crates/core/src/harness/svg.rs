//! Scatter plots of sampled actions. Each evaluation state is colored by the
//! quadrant its sampled action lands in; the actions are black dots.

use std::fmt::Write as _;
use std::path::Path;

use crate::bandit::{BanditSpec, Point, Quadrant, Rect};
use crate::error::Result;
use crate::metrics::ActionSampler;
use crate::rng::{stream_rng, Stream};

const SIZE: f64 = 400.0;
const MARGIN: f64 = 20.0;

/// Fill color for a quadrant, first through fourth.
pub fn quadrant_color(q: Quadrant) -> &'static str {
    match q {
        Quadrant::First => "#ff00ff",
        Quadrant::Second => "#2ca02c",
        Quadrant::Third => "#c4a484",
        Quadrant::Fourth => "#1f77b4",
    }
}

fn bounds(spec: &BanditSpec) -> Rect {
    let (t, a) = (spec.test_box, spec.action_box);
    Rect::new([t.lo[0].min(a.lo[0]), t.lo[1].min(a.lo[1])], [t.hi[0].max(a.hi[0]), t.hi[1].max(a.hi[1])])
}

/// Renders the scatter as SVG text. States come from the test box via the
/// `Plot` stream of `seed`, then one action per state is sampled.
pub fn scatter_svg(policy: &dyn ActionSampler, spec: &BanditSpec, n: usize, seed: u64) -> Result<String> {
    let mut rng = stream_rng(seed, Stream::Plot);
    let states: Vec<Point> = (0..n).map(|_| spec.test_box.sample(&mut rng)).collect();
    let actions = if n == 0 { Vec::new() } else { policy.sample_actions(&states, &mut rng)? };
    let view = bounds(spec);
    let span = SIZE - 2.0 * MARGIN;
    let px = |p: Point| {
        let x = MARGIN + (p[0] - view.lo[0]) / (view.hi[0] - view.lo[0]) * span;
        let y = MARGIN + (view.hi[1] - p[1]) / (view.hi[1] - view.lo[1]) * span;
        (x.clamp(0.0, SIZE), y.clamp(0.0, SIZE))
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let (cx, cy) = px(spec.center);
    let _ = writeln!(
        s,
        r#"<g id="axes" stroke="gray" stroke-width="1"><line x1="{MARGIN}" y1="{cy:.2}" x2="{:.2}" y2="{cy:.2}"/><line x1="{cx:.2}" y1="{MARGIN}" x2="{cx:.2}" y2="{:.2}"/></g>"#,
        SIZE - MARGIN,
        SIZE - MARGIN
    );
    let _ = writeln!(s, r#"<g id="states">"#);
    for (st, a) in states.iter().zip(&actions) {
        let (x, y) = px(*st);
        let color = quadrant_color(spec.quadrant(*a));
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{color}"/>"#);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="actions">"#);
    for a in &actions {
        let (x, y) = px(*a);
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1" fill="black"/>"#);
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_scatter_svg(policy: &dyn ActionSampler, spec: &BanditSpec, n: usize, seed: u64, path: &Path) -> Result<()> {
    std::fs::write(path, scatter_svg(policy, spec, n, seed)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::GmmOracle;

    #[test]
    fn empty_plot_has_axes() {
        let spec = BanditSpec::unit(0.08);
        let svg = scatter_svg(&GmmOracle(&spec), &spec, 0, 1).unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains(r#"id="axes""#));
        assert!(!svg.contains("<circle"));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = BanditSpec::unit(0.08);
        let a = scatter_svg(&GmmOracle(&spec), &spec, 200, 5).unwrap();
        let b = scatter_svg(&GmmOracle(&spec), &spec, 200, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matches("<circle").count(), 400);
    }
}
