//! Turning a coarse prediction into a dense map the fine model can read.
//!
//! Class vectors are duplicated over every pixel, boxes are rasterized into
//! one plane per class, and dense maps pass through untouched. The raster
//! then goes through [`GTransform`] (two conv+ReLU layers) so the result has
//! exactly the image's shape, and is concatenated to the image.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BoundParams, Head, LayerSpec, Model, ModelSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Channels between the two convolutions of [`GTransform`].
pub const G_HIDDEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoxRaster {
    /// 1 inside, 0 outside; no gradient reaches the box coordinates.
    Hard,
    /// Product of edge sigmoids with slope `k` per pixel.
    Soft { k: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EncodingKind {
    ClassVector { classes: usize },
    BoxSet { num_classes: usize, raster: BoxRaster },
    DenseMap { channels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEncoding {
    pub kind: EncodingKind,
    pub width: usize,
    pub height: usize,
}

impl PredictionEncoding {
    pub fn new(kind: EncodingKind, width: usize, height: usize) -> Result<Self> {
        match kind {
            EncodingKind::ClassVector { classes } if classes < 2 => {
                return Err(invalid("class-vector encoding needs at least 2 classes"))
            }
            EncodingKind::BoxSet { num_classes: 0, .. } => {
                return Err(invalid("box encoding needs at least 1 class"))
            }
            EncodingKind::BoxSet {
                raster: BoxRaster::Soft { k },
                ..
            } if !(k > 0.0 && k.is_finite()) => {
                return Err(invalid(format!("soft box slope must be positive, got {k}")))
            }
            EncodingKind::DenseMap { channels: 0 } => {
                return Err(invalid("dense encoding needs at least 1 channel"))
            }
            _ => {}
        }
        if width == 0 || height == 0 {
            return Err(invalid("encoding needs a non-empty spatial size"));
        }
        Ok(Self {
            kind,
            width,
            height,
        })
    }

    /// Channels of the rasterized map.
    pub fn raster_channels(&self) -> usize {
        match self.kind {
            EncodingKind::ClassVector { classes } => classes,
            EncodingKind::BoxSet { num_classes, .. } => num_classes,
            EncodingKind::DenseMap { channels } => channels,
        }
    }

    /// Rasterizes a batch of predictions held on the graph.
    ///
    /// Class vectors are `(n, c)` probabilities, boxes are `(n, 4)` (one object
    /// per image, single class), dense maps are `(n, c, h, w)`.
    pub fn rasterize(&self, g: &mut Graph, pred: Var) -> Result<Var> {
        let (h, w) = (self.height, self.width);
        match self.kind {
            EncodingKind::ClassVector { .. } => class_vector_map(g, pred, h, w),
            EncodingKind::BoxSet { num_classes, raster } => {
                if num_classes != 1 {
                    return Err(invalid("batched box rasterization is single-class"));
                }
                match raster {
                    BoxRaster::Soft { k } => soft_box_map(g, pred, h, w, k),
                    BoxRaster::Hard => {
                        let map = hard_box_map(g.value(pred), h, w)?;
                        Ok(g.constant(map))
                    }
                }
            }
            EncodingKind::DenseMap { .. } => {
                let s = g.shape(pred);
                if s.len() != 4 || s[2] != h || s[3] != w {
                    return Err(Error::ShapeMismatch {
                        op: "encode_dense",
                        detail: format!("map {s:?} for target {h}x{w}"),
                    });
                }
                Ok(pred)
            }
        }
    }
}

/// Axis-aligned box in image fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: Option<usize>,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            class: None,
        }
    }

    /// Box from corner coordinates `[x0, x1] x [y0, y1]`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class = Some(class);
        self
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Duplicates a probability vector over a `w x h` grid: `(c, h, w)`.
pub fn encode_class_vector(probs: &[f64], w: usize, h: usize) -> Result<Tensor> {
    if probs.len() < 2 {
        return Err(invalid("class vector needs at least 2 entries"));
    }
    let plane = w * h;
    Tensor::new(
        [probs.len(), h, w],
        probs
            .iter()
            .flat_map(|&p| std::iter::repeat(p).take(plane))
            .collect(),
    )
}

/// Rasterizes boxes into `(num_classes, h, w)`, one plane per class.
///
/// Hard mode sets a pixel to 1 when its center lies in `[x0, x1) x [y0, y1)`
/// of some box of that class. Soft mode uses the product of four sigmoids of
/// the signed pixel distances to the edges; overlapping boxes take the max.
pub fn encode_boxes(
    boxes: &[BBox],
    w: usize,
    h: usize,
    num_classes: usize,
    mode: BoxRaster,
) -> Result<Tensor> {
    let mut out = Tensor::zeros([num_classes.max(1), h, w]);
    if num_classes == 0 {
        return Err(invalid("num_classes must be at least 1"));
    }
    for b in boxes {
        let c = b.class.unwrap_or(0);
        if c >= num_classes {
            return Err(invalid(format!("box class {c} out of range for {num_classes} classes")));
        }
        let plane = &mut out.data_mut()[c * h * w..(c + 1) * h * w];
        let (x0, x1) = (b.x0() * w as f64, b.x1() * w as f64);
        let (y0, y1) = (b.y0() * h as f64, b.y1() * h as f64);
        for i in 0..h {
            let py = i as f64 + 0.5;
            for j in 0..w {
                let px = j as f64 + 0.5;
                let v = match mode {
                    BoxRaster::Hard => {
                        if px >= x0 && px < x1 && py >= y0 && py < y1 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    BoxRaster::Soft { k } => soft_edge_product(px, py, x0, x1, y0, y1, k),
                };
                let slot = &mut plane[i * w + j];
                *slot = slot.max(v);
            }
        }
    }
    Ok(out)
}

fn soft_edge_product(px: f64, py: f64, x0: f64, x1: f64, y0: f64, y1: f64, k: f64) -> f64 {
    use crate::graph::sigmoid;
    sigmoid(k * (px - x0)) * sigmoid(k * (x1 - px)) * sigmoid(k * (py - y0)) * sigmoid(k * (y1 - py))
}

/// Dense predictions need no processing beyond a spatial check.
pub fn encode_dense(map: &Tensor, w: usize, h: usize) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 3 || s[1] != h || s[2] != w {
        return Err(Error::ShapeMismatch {
            op: "encode_dense",
            detail: format!("map {s:?} for target {h}x{w}"),
        });
    }
    Ok(map.clone())
}

/// `(n, c)` probabilities to `(n, c, h, w)` constant planes.
pub fn class_vector_map(g: &mut Graph, probs: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::ShapeMismatch {
            op: "class_vector_map",
            detail: format!("expected (n, c>=2), got {s:?}"),
        });
    }
    let col = g.reshape(probs, [s[0], s[1], 1, 1])?;
    let ones = g.constant(Tensor::ones([1, 1, h, w]));
    g.mul(col, ones)
}

/// Differentiable soft raster of `(n, 4)` boxes to `(n, 1, h, w)`.
pub fn soft_box_map(g: &mut Graph, boxes: Var, h: usize, w: usize, k: f64) -> Result<Var> {
    let s = g.shape(boxes).to_vec();
    if s.len() != 2 || s[1] != 4 {
        return Err(Error::ShapeMismatch {
            op: "soft_box_map",
            detail: format!("expected (n, 4), got {s:?}"),
        });
    }
    let n = s[0];
    let px = g.constant(Tensor::from_fn([1, 1, 1, w], |j| j as f64 + 0.5));
    let py = g.constant(Tensor::from_fn([1, 1, h, 1], |i| i as f64 + 0.5));
    let mut edges = |center: usize, extent: usize, size: usize, grid: Var, shape: [usize; 4]| {
        let c = g.slice(boxes, 1, center, center + 1)?;
        let e = g.slice(boxes, 1, extent, extent + 1)?;
        let c = g.scale(c, size as f64)?;
        let half = g.scale(e, 0.5 * size as f64)?;
        let lo = g.sub(c, half)?;
        let hi = g.add(c, half)?;
        let lo = g.reshape(lo, shape)?;
        let hi = g.reshape(hi, shape)?;
        let d_lo = g.sub(grid, lo)?;
        let d_hi = g.sub(hi, grid)?;
        let d_lo = g.scale(d_lo, k)?;
        let d_hi = g.scale(d_hi, k)?;
        let s_lo = g.sigmoid(d_lo)?;
        let s_hi = g.sigmoid(d_hi)?;
        g.mul(s_lo, s_hi)
    };
    let xs = edges(0, 2, w, px, [n, 1, 1, 1])?;
    let ys = edges(1, 3, h, py, [n, 1, 1, 1])?;
    g.mul(ys, xs)
}

/// Hard raster of `(n, 4)` boxes to a constant `(n, 1, h, w)` map.
pub fn hard_box_map(boxes: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = boxes.shape();
    if s.len() != 2 || s[1] != 4 {
        return Err(Error::ShapeMismatch {
            op: "hard_box_map",
            detail: format!("expected (n, 4), got {s:?}"),
        });
    }
    let mut data = Vec::with_capacity(s[0] * h * w);
    for row in boxes.data().chunks(4) {
        let b = BBox::new(row[0], row[1], row[2], row[3]);
        data.extend(encode_boxes(&[b], w, h, 1, BoxRaster::Hard)?.into_data());
    }
    Tensor::new([s[0], 1, h, w], data)
}

/// Two 3x3 conv+ReLU layers mapping a raster to the image's channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct GTransform {
    model: Model,
}

impl GTransform {
    pub fn new(
        raster_channels: usize,
        image_channels: usize,
        height: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            model: Model::init(&Self::spec(raster_channels, image_channels, height, width), rng)?,
        })
    }

    pub fn spec(raster_channels: usize, image_channels: usize, height: usize, width: usize) -> ModelSpec {
        ModelSpec {
            in_channels: raster_channels,
            height,
            width,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: G_HIDDEN,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    out_channels: image_channels,
                    kernel: 3,
                },
                LayerSpec::Relu,
            ],
            head: Head::Dense(image_channels),
        }
    }

    pub fn from_model(model: Model) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        self.model.bind(g, trainable)
    }

    /// `z = relu(conv(relu(conv(raster))))`, the same shape as the image.
    pub fn apply(&self, g: &mut Graph, params: &BoundParams, raster: Var) -> Result<Var> {
        self.model.forward(g, params, raster)
    }
}

/// `x ⊕ z` along channels.
pub fn fine_input(g: &mut Graph, x: Var, z: Var) -> Result<Var> {
    let (sx, sz) = (g.shape(x), g.shape(z));
    if sx.len() != 4 || sz.len() != 4 || sx[0] != sz[0] || sx[2..] != sz[2..] {
        return Err(Error::ShapeMismatch {
            op: "fine_input",
            detail: format!("image {sx:?} vs map {sz:?}"),
        });
    }
    g.concat_channels(&[x, z])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_vector_duplicates() {
        let m = encode_class_vector(&[0.2, 0.5, 0.3], 2, 2).unwrap();
        assert_eq!(m.shape(), &[3, 2, 2]);
        assert_eq!(
            m.data(),
            &[0.2, 0.2, 0.2, 0.2, 0.5, 0.5, 0.5, 0.5, 0.3, 0.3, 0.3, 0.3]
        );
        let onehot = encode_class_vector(&[1.0, 0.0], 3, 2).unwrap();
        assert_eq!(&onehot.data()[..6], &[1.0; 6]);
        assert_eq!(&onehot.data()[6..], &[0.0; 6]);
        assert!(encode_class_vector(&[1.0], 2, 2).is_err());
    }

    #[test]
    fn class_vector_channel_means_equal_probs() {
        let probs = [0.1, 0.25, 0.4, 0.25];
        let m = encode_class_vector(&probs, 5, 7).unwrap();
        for (c, &p) in probs.iter().enumerate() {
            let plane = &m.data()[c * 35..(c + 1) * 35];
            assert!((plane.iter().sum::<f64>() / 35.0 - p).abs() < 1e-12);
            assert!(plane.iter().all(|&v| v == p));
        }
    }

    #[test]
    fn full_image_box_is_all_ones() {
        let m = encode_boxes(&[BBox::new(0.5, 0.5, 1.0, 1.0)], 6, 5, 1, BoxRaster::Hard).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_by_two_box_on_four_by_four() {
        let b = BBox::from_corners(0.25, 0.25, 0.75, 0.75);
        let m = encode_boxes(&[b], 4, 4, 1, BoxRaster::Hard).unwrap();
        assert_eq!(m.sum(), 4.0);
        for (i, &v) in m.data().iter().enumerate() {
            let (r, c) = (i / 4, i % 4);
            let inside = (1..=2).contains(&r) && (1..=2).contains(&c);
            assert_eq!(v, if inside { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn multi_class_boxes_use_separate_planes() {
        let a = BBox::from_corners(0.0, 0.0, 0.5, 0.5).with_class(0);
        let b = BBox::from_corners(0.5, 0.5, 1.0, 1.0).with_class(2);
        let m = encode_boxes(&[a, b], 4, 4, 3, BoxRaster::Hard).unwrap();
        assert_eq!(m.shape(), &[3, 4, 4]);
        let sums: Vec<f64> = m.data().chunks(16).map(|p| p.iter().sum()).collect();
        assert_eq!(sums, vec![4.0, 0.0, 4.0]);
        assert!(encode_boxes(&[b], 4, 4, 2, BoxRaster::Hard).is_err());
    }

    #[test]
    fn degenerate_box_is_empty_when_hard() {
        let b = BBox::new(0.5, 0.5, 0.0, 0.3);
        let hard = encode_boxes(&[b], 8, 8, 1, BoxRaster::Hard).unwrap();
        assert_eq!(hard.sum(), 0.0);
        let soft = encode_boxes(&[b], 8, 8, 1, BoxRaster::Soft { k: 5.0 }).unwrap();
        assert!(soft.data().iter().all(|&v| v < 0.5));
    }

    #[test]
    fn soft_values_are_open_unit_interval() {
        let b = BBox::new(0.4, 0.6, 0.3, 0.5);
        let soft = encode_boxes(&[b], 16, 16, 1, BoxRaster::Soft { k: 2.0 }).unwrap();
        assert!(soft.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dense_is_identity_and_idempotent() {
        let m = Tensor::from_fn([1, 32, 32], |i| (i % 2) as f64);
        let once = encode_dense(&m, 32, 32).unwrap();
        assert_eq!(once, m);
        assert_eq!(encode_dense(&once, 32, 32).unwrap(), once);
        assert!(encode_dense(&m, 16, 32).is_err());
    }

    #[test]
    fn graph_soft_raster_matches_plain_raster() {
        let b = BBox::new(0.45, 0.55, 0.35, 0.25);
        let mut g = Graph::new();
        let v = g.constant(Tensor::new([1, 4], b.to_array().to_vec()).unwrap());
        let m = soft_box_map(&mut g, v, 12, 10, 3.0).unwrap();
        let plain = encode_boxes(&[b], 10, 12, 1, BoxRaster::Soft { k: 3.0 }).unwrap();
        for (a, p) in g.value(m).data().iter().zip(plain.data()) {
            assert!((a - p).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_g_gives_zero_map() {
        let mut rng = Rng::new(0, 0);
        let mut gt = GTransform::new(3, 1, 6, 6, &mut rng).unwrap();
        for p in gt.model_mut().params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let params = gt.bind(&mut g, true);
        let r = g.constant(Tensor::from_fn([2, 3, 6, 6], |i| i as f64 * 0.01));
        let z = gt.apply(&mut g, &params, r).unwrap();
        assert_eq!(g.shape(z), &[2, 1, 6, 6]);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_raster_zero_bias_gives_zero_map() {
        let mut rng = Rng::new(5, 0);
        let gt = GTransform::new(1, 3, 6, 6, &mut rng).unwrap();
        let mut g = Graph::new();
        let params = gt.bind(&mut g, true);
        let r = g.constant(Tensor::zeros([1, 1, 6, 6]));
        let z = gt.apply(&mut g, &params, r).unwrap();
        assert_eq!(g.shape(z), &[1, 3, 6, 6]);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn g_rejects_channel_mismatch() {
        let gt = GTransform::new(2, 1, 4, 4, &mut Rng::new(0, 0)).unwrap();
        let mut g = Graph::new();
        let params = gt.bind(&mut g, false);
        let r = g.constant(Tensor::zeros([1, 3, 4, 4]));
        assert!(gt.apply(&mut g, &params, r).is_err());
    }

    #[test]
    fn fine_input_layout() {
        let mut g = Graph::new();
        let xt = Tensor::from_fn([1, 3, 4, 5], |i| i as f64);
        let x = g.constant(xt.clone());
        let z = g.constant(Tensor::zeros([1, 3, 4, 5]));
        let u = fine_input(&mut g, x, z).unwrap();
        assert_eq!(g.shape(u), &[1, 6, 4, 5]);
        let back = g.slice(u, 1, 0, 3).unwrap();
        assert_eq!(g.value(back), &xt);
        let rest = g.slice(u, 1, 3, 6).unwrap();
        assert!(g.value(rest).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros([1, 3, 4, 4]));
        assert!(fine_input(&mut g, x, bad).is_err());
    }

    #[test]
    fn encoding_validation() {
        assert!(PredictionEncoding::new(EncodingKind::ClassVector { classes: 1 }, 4, 4).is_err());
        assert!(PredictionEncoding::new(
            EncodingKind::BoxSet {
                num_classes: 1,
                raster: BoxRaster::Soft { k: 0.0 }
            },
            4,
            4
        )
        .is_err());
        assert!(PredictionEncoding::new(EncodingKind::DenseMap { channels: 0 }, 4, 4).is_err());
        assert!(PredictionEncoding::new(EncodingKind::DenseMap { channels: 1 }, 4, 4).is_ok());
    }
}
