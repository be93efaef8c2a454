//! Independent recomputations of the geometry, tensor-loss and
//! detection-loss primitives.

use dvpnet::codec::{Codec, ScaleMask, SceneLabels};
use dvpnet::geometry::{
    consistency_error, d_rms, line_through, point_line_distance, LineSegment, Point2, Polyline,
};
use dvpnet::loss::{line_err, total_loss, LossWeights};
use dvpnet::nn::{LineErrMode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn pt(r: &mut ChaCha8Rng) -> Point2 {
    Point2::new(r.random_range(-50.0..50.0), r.random_range(-50.0..50.0))
}

#[test]
fn point_line_distance_matches_foot_of_perpendicular() {
    let mut r = rng(1);
    for _ in 0..500 {
        let (a, b, p) = (pt(&mut r), pt(&mut r), pt(&mut r));
        if a.distance(&b) < 1e-3 {
            continue;
        }
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / (dx * dx + dy * dy);
        let foot = Point2::new(a.x + t * dx, a.y + t * dy);
        let d = point_line_distance(p, &line_through(a, b).unwrap());
        assert!((d - p.distance(&foot)).abs() <= 1e-9 * (1.0 + d), "{d} vs {}", p.distance(&foot));
    }
}

#[test]
fn consistency_error_is_scaled_mean_of_single_edge_calls() {
    let mut r = rng(2);
    for _ in 0..200 {
        let edges: Vec<Vec<Point2>> = (0..2)
            .map(|_| (0..r.random_range(2..20)).map(|_| pt(&mut r)).collect())
            .collect();
        let v = pt(&mut r);
        let diag = r.random_range(10.0..1000.0);
        let direct = (d_rms(&edges[0], v).unwrap() + d_rms(&edges[1], v).unwrap()) / 2.0 * 100.0 / diag;
        let ce = consistency_error(&edges, v, diag).unwrap();
        assert!((ce - direct).abs() <= 1e-12 * (1.0 + direct));
    }
}

#[test]
fn masked_mse_matches_scalar_loop() {
    let mut r = rng(3);
    for _ in 0..100 {
        let n = r.random_range(1..40);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| if r.random_bool(0.6) { 1.0 } else { 0.0 }).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            num += m[i] * (p[i] - t[i]) * (p[i] - t[i]);
            den += m[i];
        }
        let expected = num / f64::max(den, 1.0);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(&[n], p).unwrap());
        let l = tape.mse(v, &t, &m).unwrap();
        assert!((tape.value(l).data()[0] - expected).abs() <= 1e-12);
    }
}

/// `−[t·ln σ(z) + (1−t)·ln σ(−z)]` with each log evaluated directly.
fn bce_direct(z: f64, t: f64) -> f64 {
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    -(t * s(z).ln() + (1.0 - t) * s(-z).ln())
}

#[test]
fn bce_matches_direct_evaluation() {
    let mut r = rng(4);
    for _ in 0..100 {
        let n = r.random_range(1..30);
        let z: Vec<f64> = (0..n).map(|_| r.random_range(-30.0..30.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| r.random_range(0.0..=1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
        let expected = z.iter().zip(&t).zip(&w).map(|((&z, &t), &w)| w * bce_direct(z, t)).sum::<f64>()
            / w.iter().sum::<f64>();
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(&[n], z).unwrap());
        let l = tape.bce_with_logits(v, &t, &w).unwrap();
        assert!((tape.value(l).data()[0] - expected).abs() <= 1e-10);
    }
}

#[test]
fn bce_is_finite_at_extreme_logits() {
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(Tensor::from_vec(&[4], vec![1e4, -1e4, 1e4, -1e4]).unwrap());
    let l = tape.bce_with_logits(v, &[1.0, 0.0, 0.0, 1.0], &[1.0; 4]).unwrap();
    assert!((tape.value(l).data()[0] - 1e4 / 2.0).abs() < 1e-9);
}

fn polyline(pts: &[(f64, f64)]) -> Polyline {
    Polyline::new(pts.iter().map(|&(x, y)| Point2::new(x, y)).collect()).unwrap()
}

#[test]
fn line_err_matches_scalar_loop() {
    let mut r = rng(5);
    for _ in 0..200 {
        let s = r.random_range(2..30);
        let a: Vec<(f64, f64)> = (0..s).map(|_| (r.random_range(-9.0..9.0), r.random_range(-9.0..9.0))).collect();
        let b: Vec<(f64, f64)> = (0..s).map(|_| (r.random_range(-9.0..9.0), r.random_range(-9.0..9.0))).collect();
        let mut sum = 0.0;
        for i in 0..s {
            sum += ((a[i].0 - b[i].0).powi(2) + (a[i].1 - b[i].1).powi(2)).sqrt();
        }
        let got = line_err(&polyline(&a), &polyline(&b), LineErrMode::Euclidean).unwrap();
        assert!((got - sum / s as f64).abs() <= 1e-12);
    }
}

#[test]
fn line_err_constant_offset_and_length_mismatch() {
    let a = polyline(&[(0.0, 0.0), (1.0, 2.0), (5.0, 5.0)]);
    let b = polyline(&[(3.0, 4.0), (4.0, 6.0), (8.0, 9.0)]);
    assert_eq!(line_err(&a, &a, LineErrMode::Euclidean).unwrap(), 0.0);
    assert!((line_err(&a, &b, LineErrMode::Euclidean).unwrap() - 5.0).abs() < 1e-15);
    assert!(line_err(&a, &polyline(&[(0.0, 0.0), (1.0, 1.0)]), LineErrMode::Euclidean).is_err());
}

fn seg(ax: f64, ay: f64, bx: f64, by: f64) -> LineSegment {
    LineSegment::new(Point2::new(ax, ay), Point2::new(bx, by)).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One image on a 96 input (grids 3, 6, 12), S = 2, all raw outputs set
/// by hand, compared against the terms written out with scalars.
#[test]
fn single_cell_hand_case() {
    let size = 96;
    let codec = Codec::new(size, 2);
    // vp at (40, 20): cells (1,0), (2,1), (5,2); lines end at the vp.
    let labels = SceneLabels {
        vp: Point2::new(40.0, 20.0),
        lines: [seg(10.0, 80.0, 40.0, 20.0), seg(70.0, 90.0, 40.0, 20.0)],
    };
    let targets = codec.encode_targets(&labels).unwrap();
    let b = codec.layout.channels();
    let mut r = rng(6);
    let maps: Vec<Tensor<f64>> = codec
        .grids
        .iter()
        .map(|g| Tensor::from_fn(&[1, b, g.n, g.n], |_| r.random_range(-2.0..2.0)))
        .collect();

    let mut coord = 0.0;
    let mut conf = 0.0;
    let mut lines = [0.0, 0.0];
    for (s, g) in codec.grids.iter().enumerate() {
        let st = g.stride as f64;
        let (col, row) = ((40.0 / st) as usize, (20.0 / st) as usize);
        let plane = g.n * g.n;
        let at = |ch: usize, cell: usize| maps[s].data()[ch * plane + cell];
        let pos = row * g.n + col;
        let (mut num, mut den) = (0.0, 0.0);
        for cell in 0..plane {
            let (t, w) = if cell == pos { (1.0, 1.0) } else { (0.0, 0.5) };
            num += w * bce_direct(at(2, cell), t);
            den += w;
        }
        conf += num / den;
        let (fx, fy) = (40.0 / st - col as f64, 20.0 / st - row as f64);
        coord += ((sigmoid(at(0, pos)) - fx).powi(2) + (sigmoid(at(1, pos)) - fy).powi(2)) / 2.0;
        // canonical order: both start at the vp; left has the smaller midpoint x
        let pts = [[(40.0, 20.0), (10.0, 80.0)], [(40.0, 20.0), (70.0, 90.0)]];
        for (k, line) in pts.iter().enumerate() {
            let mut e = 0.0;
            for (i, &(x, y)) in line.iter().enumerate() {
                let ch = 3 + 4 * k + 2 * i;
                let dx = at(ch, pos) - (x / st - col as f64);
                let dy = at(ch + 1, pos) - (y / st - row as f64);
                e += (dx * dx + dy * dy).sqrt();
            }
            lines[k] += e / 2.0;
        }
    }
    let w = LossWeights::for_slices(2);
    let total = w.lambda_coord * coord + conf + w.lambda_l * (lines[0] + lines[1]);

    let mut tape = Tape::new();
    let preds = [0, 1, 2].map(|s| tape.leaf(maps[s].clone()));
    let (_, got) = total_loss(&mut tape, preds, &[targets], &codec, &w, ScaleMask::ALL).unwrap();
    for (name, a, e) in [
        ("coord", got.coord, coord),
        ("conf", got.conf, conf),
        ("left", got.line_left, lines[0]),
        ("right", got.line_right, lines[1]),
        ("total", got.total, total),
    ] {
        assert!((a - e).abs() <= 1e-12, "{name}: {a} vs {e}");
    }
    assert!((got.recombine(&w) - got.total).abs() <= 1e-12);
}

#[test]
fn loss_invariants() {
    let codec = Codec::new(96, 3);
    let labels = SceneLabels {
        vp: Point2::new(50.0, 30.0),
        lines: [seg(5.0, 90.0, 45.5, 36.0), seg(90.0, 80.0, 54.0, 35.0)],
    };
    let targets = codec.encode_targets(&labels).unwrap();
    let b = codec.layout.channels();
    let mut r = rng(8);
    let maps: Vec<Tensor<f64>> = codec
        .grids
        .iter()
        .map(|g| Tensor::from_fn(&[1, b, g.n, g.n], |_| r.random_range(-2.0..2.0)))
        .collect();
    let eval = |maps: &[Tensor<f64>], w: &LossWeights| {
        let mut tape = Tape::new();
        let preds = [0, 1, 2].map(|s| tape.leaf(maps[s].clone()));
        total_loss(&mut tape, preds, std::slice::from_ref(&targets), &codec, w, ScaleMask::ALL)
            .unwrap()
            .1
    };
    let w = LossWeights::for_slices(3);
    let base = eval(&maps, &w);
    assert!(base.total >= 0.0);

    // scaling lambda_l scales the line part exactly
    let mut w3 = w;
    w3.lambda_l *= 3.0;
    let scaled = eval(&maps, &w3);
    let line_part = |l: &dvpnet::loss::LossBreakdown, w: &LossWeights| l.total - w.lambda_coord * l.coord - l.conf;
    assert!((line_part(&scaled, &w3) - 3.0 * line_part(&base, &w)).abs() <= 1e-12);

    // swapping the confidences of two negative cells leaves the loss unchanged
    let mut swapped = maps.clone();
    let g = codec.grids[2];
    let plane = g.n * g.n;
    let pos = targets.scales[2].cell.map(|(c, r)| r * g.n + c).unwrap();
    let (i, j) = if pos == 0 { (1, 2) } else { (0, plane - 1) };
    assert_ne!(j, pos);
    let d = swapped[2].data_mut();
    d.swap(2 * plane + i, 2 * plane + j);
    let perm = eval(&swapped, &w);
    assert!((perm.total - base.total).abs() <= 1e-12);
}
