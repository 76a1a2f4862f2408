use srdp::bandit::{BanditSpec, Point, Quadrant};
use srdp::harness::mdp::{make_synthetic_mdp, reward};
use srdp::harness::svg::{quadrant_color, scatter_svg};
use srdp::metrics::{
    grouped_chamfer, quadrant_accuracy, self_distance_floor, FirstModePolicy, GmmOracle, Grouping, UniformPolicy,
};
use srdp::rng::{stream_rng, Stream};

#[test]
fn reward_matches_brute_force_over_corners() {
    let spec = BanditSpec::unit(0.08);
    let corners: [Point; 4] = [[0.8, 0.8], [-0.8, 0.8], [-0.8, -0.8], [0.8, -0.8]];
    let mut rng = stream_rng(4, Stream::Eval);
    for _ in 0..2000 {
        let a = spec.action_box.sample(&mut rng);
        let mut best = f64::NEG_INFINITY;
        for c in corners {
            best = best.max(-((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)));
        }
        assert_eq!(reward(&spec, a), best);
    }
}

#[test]
fn synthetic_mdp_is_terminal_and_rewarded() {
    let spec = BanditSpec::unit(0.08);
    let t = make_synthetic_mdp(&spec, 500, 1).unwrap();
    assert_eq!(t.len(), 500);
    assert!(t.dones.iter().all(|&d| d == 1.0));
    assert_eq!(t.states, t.next_states);
    for i in 0..500 {
        assert!(spec.test_box.contains([t.states[[i, 0]], t.states[[i, 1]]]));
        assert_eq!(t.rewards[i], reward(&spec, [t.actions[[i, 0]], t.actions[[i, 1]]]));
    }
    assert_eq!(make_synthetic_mdp(&spec, 500, 1).unwrap().rewards, t.rewards);
}

#[test]
fn mode_pairs_follow_the_quadrant_table() {
    let spec = BanditSpec::unit(0.08);
    let diag = ([-0.8, -0.8], [0.8, 0.8]);
    let anti = ([-0.8, 0.8], [0.8, -0.8]);
    assert_eq!(spec.gmm_means([0.5, 0.5]), anti);
    assert_eq!(spec.gmm_means([-0.5, 0.5]), diag);
    assert_eq!(spec.gmm_means([-0.5, -0.5]), anti);
    assert_eq!(spec.gmm_means([0.5, -0.5]), diag);
}

#[test]
fn oracle_policy_sits_near_the_floor() {
    let spec = BanditSpec::unit(0.08);
    let floor = self_distance_floor(&spec, 1000, 10, Grouping::Quadrant, 0).unwrap();
    assert!(floor > 0.0 && floor < 0.2, "floor {floor}");
    let other = grouped_chamfer(&GmmOracle(&spec), &spec, 1000, 10, Grouping::Quadrant, 1).unwrap().total;
    assert!((other - floor).abs() < 0.5 * floor, "{other} vs {floor}");
    let one_mode = grouped_chamfer(&FirstModePolicy(&spec), &spec, 1000, 10, Grouping::Quadrant, 0).unwrap().total;
    assert!(one_mode > 4.0 * floor, "collapsed policy {one_mode} vs floor {floor}");
}

#[test]
fn accuracy_oracles() {
    let spec = BanditSpec::unit(0.08);
    let mut rng = stream_rng(0, Stream::Accuracy);
    let gmm = quadrant_accuracy(&GmmOracle(&spec), &spec, 5000, &mut rng).unwrap();
    assert!(gmm >= 0.95, "gmm accuracy {gmm}");
    let n = 20_000;
    let uni = quadrant_accuracy(&UniformPolicy(spec.action_box), &spec, n, &mut rng).unwrap();
    let want = 2.0 * std::f64::consts::PI * 0.15f64.powi(2) / 4.0;
    let se = (want * (1.0 - want) / n as f64).sqrt();
    assert!((uni - want).abs() <= 4.0 * se, "uniform accuracy {uni}, want {want}");
}

fn circles(svg: &str, group: &str) -> Vec<(f64, f64, String)> {
    let start = svg.find(&format!(r#"<g id="{group}">"#)).unwrap();
    let body = &svg[start..start + svg[start..].find("</g>").unwrap()];
    let attr = |line: &str, name: &str| {
        let k = line.find(&format!(r#" {name}=""#)).unwrap() + name.len() + 3;
        line[k..k + line[k..].find('"').unwrap()].to_string()
    };
    body.lines()
        .filter(|l| l.starts_with("<circle"))
        .map(|l| (attr(l, "cx").parse().unwrap(), attr(l, "cy").parse().unwrap(), attr(l, "fill")))
        .collect()
}

#[test]
fn scatter_colors_states_by_action_quadrant() {
    let spec = BanditSpec::unit(0.08);
    let svg = scatter_svg(&FirstModePolicy(&spec), &spec, 800, 3).unwrap();
    let states = circles(&svg, "states");
    assert_eq!(states.len(), 800);
    assert_eq!(circles(&svg, "actions").len(), 800);
    // The view spans [-1, 1]^2 in a 400 px canvas with a 20 px margin and y up.
    let to_point = |x: f64, y: f64| -> Point { [(x - 20.0) / 180.0 - 1.0, 1.0 - (y - 20.0) / 180.0] };
    for q in Quadrant::ALL {
        let fills: Vec<&String> =
            states.iter().filter(|(x, y, _)| spec.quadrant(to_point(*x, *y)) == q).map(|(_, _, f)| f).collect();
        let top = fills.iter().filter(|f| **f == fills[0]).count();
        assert!(fills.len() > 100);
        assert!(top as f64 >= 0.9 * fills.len() as f64, "{q:?}: {top} of {}", fills.len());
        let mean = spec.gmm_means(match q {
            Quadrant::First => [0.5, 0.5],
            Quadrant::Second => [-0.5, 0.5],
            Quadrant::Third => [-0.5, -0.5],
            Quadrant::Fourth => [0.5, -0.5],
        });
        assert_eq!(fills[0], quadrant_color(spec.quadrant(mean.0)));
    }
}
