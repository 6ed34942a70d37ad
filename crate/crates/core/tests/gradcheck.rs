// Reverse-mode gradients against central differences.

use c2f_core::encode::{class_vector_map, fine_input, soft_box_map, BoxRaster, GTransform};
use c2f_core::gradcheck::{max_error, TOLERANCE};
use c2f_core::loss::{log_l1_loss, pixel_bce_loss, softmax_ce_loss};
use c2f_core::nn::{BoundParams, Head, ModelSpec};
use c2f_core::train::{encoding_for, CoarseFinePair};
use c2f_core::{Graph, Result, Rng, Tensor, Var};

const POINTS: u64 = 20;
// Cap on checked coordinates per input.
const MAX_COORDS: usize = 24;

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(lo, hi))
}

/// Normal draws pushed at least `gap` away from each point in `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], gap: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.normal();
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

/// Runs `max_error` at `POINTS` random points and asserts the worst error.
fn at_points(name: &str, make: impl Fn(&mut Rng) -> Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Copy) {
    let mut worst: f64 = 0.0;
    for p in 0..POINTS {
        let mut rng = Rng::new(p, 7);
        let inputs = make(&mut rng);
        worst = worst.max(max_error(&inputs, &mut rng, MAX_COORDS, f).unwrap());
    }
    assert!(worst < TOLERANCE, "{name}: relative error {worst:e}");
}

#[test]
fn elementwise_binary_with_broadcast() {
    let pair = |r: &mut Rng| vec![normal(&[2, 1, 3], r), normal(&[4, 1], r)];
    at_points("add", pair, |g, v| g.add(v[0], v[1]));
    at_points("sub", pair, |g, v| g.sub(v[0], v[1]));
    at_points("mul", pair, |g, v| g.mul(v[0], v[1]));
    at_points(
        "div",
        |r| {
            let d = Tensor::from_fn([3], |_| {
                let m = r.uniform_range(0.5, 2.0);
                if r.uniform() < 0.5 { -m } else { m }
            });
            vec![normal(&[2, 3], r), d]
        },
        |g, v| g.div(v[0], v[1]),
    );
}

#[test]
fn matmul() {
    at_points("matmul", |r| vec![normal(&[3, 4], r), normal(&[4, 2], r)], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn conv2d() {
    let make = |r: &mut Rng| vec![normal(&[2, 2, 5, 4], r), normal(&[3, 2, 3, 3], r), normal(&[3], r)];
    at_points("conv2d pad 1", make, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1));
    at_points("conv2d pad 0", make, |g, v| g.conv2d(v[0], v[1], None, 0));
    at_points(
        "conv2d 1x1",
        |r| vec![normal(&[1, 3, 4, 4], r), normal(&[2, 3, 1, 1], r)],
        |g, v| g.conv2d(v[0], v[1], None, 0),
    );
}

#[test]
fn smooth_unary() {
    let x = |r: &mut Rng| vec![normal(&[3, 4], r)];
    at_points("sigmoid", x, |g, v| g.sigmoid(v[0]));
    at_points("exp", x, |g, v| g.exp(v[0]));
    at_points("softplus", x, |g, v| g.softplus(v[0]));
    at_points("scale", x, |g, v| g.scale(v[0], -2.5));
    at_points("log", |r| vec![uniform(&[3, 4], 0.2, 3.0, r)], |g, v| g.log(v[0]));
}

#[test]
fn kinked_unary_away_from_kinks() {
    let zero = |r: &mut Rng| vec![away_from(&[3, 4], &[0.0], 0.05, r)];
    at_points("relu", zero, |g, v| g.relu(v[0]));
    at_points("abs", zero, |g, v| g.abs(v[0]));
    at_points(
        "clamp",
        |r| vec![away_from(&[3, 4], &[-0.5, 0.5], 0.05, r)],
        |g, v| g.clamp(v[0], -0.5, 0.5),
    );
}

#[test]
fn reductions_and_layout() {
    let x = |r: &mut Rng| vec![normal(&[2, 3, 4], r)];
    at_points("sum", x, |g, v| g.sum(v[0]));
    at_points("mean", x, |g, v| g.mean(v[0]));
    at_points("sum_axis", x, |g, v| g.sum_axis(v[0], 1));
    at_points("slice", x, |g, v| g.slice(v[0], 2, 1, 3));
    at_points("reshape", x, |g, v| g.reshape(v[0], [6, 4]));
    at_points("log_softmax", |r| vec![normal(&[3, 5], r)], |g, v| g.log_softmax(v[0]));
    at_points(
        "concat",
        |r| vec![normal(&[2, 3], r), normal(&[2, 1], r)],
        |g, v| g.concat(&[v[0], v[1]], 1),
    );
    at_points(
        "concat_channels",
        |r| vec![normal(&[1, 2, 3, 3], r), normal(&[1, 1, 3, 3], r)],
        |g, v| g.concat_channels(&[v[0], v[1]]),
    );
}

#[test]
fn max_pool_with_distinct_values() {
    // A shuffled ladder keeps every window's maximum well separated.
    let make = |r: &mut Rng| {
        let mut ladder: Vec<f64> = (0..2 * 2 * 4 * 6).map(|i| i as f64 * 0.1).collect();
        r.shuffle(&mut ladder);
        vec![Tensor::new([2, 2, 4, 6], ladder).unwrap()]
    };
    at_points("max_pool2", make, |g, v| g.max_pool2(v[0]));
}

#[test]
fn losses() {
    at_points(
        "log_l1",
        |r| vec![uniform(&[3, 4], 0.1, 0.9, r)],
        |g, v| {
            let target = Tensor::from_fn([3, 4], |i| 0.05 + 0.9 * ((i * 5 % 12) as f64 / 12.0));
            let diff_ok = g.value(v[0]).data().iter().zip(target.data()).all(|(a, b)| (a - b).abs() > 1e-3);
            assert!(diff_ok, "point too close to the kink");
            log_l1_loss(g, v[0], &target)
        },
    );
    at_points("softmax_ce", |r| vec![normal(&[4, 3], r)], |g, v| softmax_ce_loss(g, v[0], &[0, 2, 1, 2]));
    at_points(
        "pixel_bce",
        |r| vec![normal(&[2, 1, 3, 3], r)],
        |g, v| {
            let target = Tensor::from_fn([2, 1, 3, 3], |i| (i % 3 == 0) as u8 as f64);
            pixel_bce_loss(g, v[0], &target)
        },
    );
}

#[test]
fn rasters() {
    at_points(
        "soft_box_map",
        |r| vec![uniform(&[2, 4], 0.2, 0.8, r)],
        |g, v| soft_box_map(g, v[0], 6, 7, 2.0),
    );
    at_points(
        "class_vector_map",
        |r| vec![uniform(&[2, 3], 0.0, 1.0, r)],
        |g, v| class_vector_map(g, v[0], 3, 2),
    );
}

#[test]
fn g_transform_on_soft_raster() {
    let gt = GTransform::new(1, 1, 8, 8, &mut Rng::new(3, 0)).unwrap();
    let gt = &gt;
    at_points(
        "g(raster(box))",
        |r| vec![uniform(&[2, 4], 0.3, 0.7, r)],
        move |g, v| {
            let raster = soft_box_map(g, v[0], 8, 8, 2.0)?;
            let p = gt.bind(g, false);
            gt.apply(g, &p, raster)
        },
    );
}

/// Loss of the full chain as a function of the coarse model's first weight
/// tensor and the input image: coarse -> raster -> g -> fine -> loss.
#[test]
fn composed_coarse_to_fine_path() {
    let spec = ModelSpec::backbone(1, 8, 8, &[3, 3], Head::Box);
    let enc = encoding_for(&spec, BoxRaster::Soft { k: 2.0 }).unwrap();
    let pair = CoarseFinePair::new(&spec, enc, 11).unwrap();
    let pair = &pair;
    let target = Tensor::new([2, 4], vec![0.4, 0.6, 0.3, 0.5, 0.55, 0.45, 0.4, 0.35]).unwrap();
    let target = &target;
    let w0 = pair.coarse.params()[0].1.clone();
    at_points(
        "coarse-to-fine chain",
        |r| vec![Tensor::from_fn(w0.shape().to_vec(), |i| w0.data()[i] + 0.05 * r.normal()), uniform(&[2, 1, 8, 8], 0.0, 1.0, r)],
        move |g, v| {
            let mut pc = pair.coarse.bind(g, false);
            let first = pc.vars()[0];
            let swapped: Vec<Var> = pc.vars().iter().map(|&p| if p == first { v[0] } else { p }).collect();
            pc = BoundParams::from_vars(swapped);
            let out_c = pair.coarse.forward(g, &pc, v[1])?;
            let raster = pair.encoding.rasterize(g, out_c)?;
            let pg = pair.g.bind(g, false);
            let z = pair.g.apply(g, &pg, raster)?;
            let u = fine_input(g, v[1], z)?;
            let pf = pair.fine.bind(g, false);
            let out_f = pair.fine.forward(g, &pf, u)?;
            let lc = log_l1_loss(g, out_c, target)?;
            let lf = log_l1_loss(g, out_f, target)?;
            g.add(lc, lf)
        },
    );
}
