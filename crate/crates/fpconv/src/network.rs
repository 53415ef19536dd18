//! Full architectures: the 4-level segmentation encoder-decoder with skip
//! connections, the classification head, final-feature fusion of two
//! networks, and segmentation metrics.

use rand_chacha::ChaCha8Rng;

use crate::blocks::{knn_upsample, BlockSpec, ConvKind, ResidualBlock};
use crate::error::{Error, Result};
use crate::flatten::NormKind;
use crate::geometry::Point;
use crate::tensor::layers::{Layer, Linear, NamedTensor, SharedMlp};
use crate::tensor::operators as op;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Classification,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "segmentation" => Ok(Task::Segmentation),
            "classification" => Ok(Task::Classification),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Architecture-level configuration shared by both tasks.
#[derive(Clone, Debug)]
pub struct NetConfig {
    /// Per-level output widths; non-decreasing, 4 encoder levels.
    pub widths: [usize; 4],
    /// Neighborhood radius at level 0; doubles per level.
    pub base_radius: f64,
    pub plane: (usize, usize),
    pub norm: NormKind,
    pub num_classes: usize,
    pub conv_kinds: [ConvKind; 4],
    pub task: Task,
    pub input_channels: usize,
    pub n_max: usize,
    pub downsample_ratio: f64,
    pub k_upsample: usize,
    pub d_g: usize,
    pub eps: f64,
    pub slope: f64,
}

impl NetConfig {
    pub fn segmentation(num_classes: usize) -> Self {
        NetConfig {
            widths: [32, 64, 128, 256],
            base_radius: 0.2,
            plane: (6, 6),
            norm: NormKind::Sparse,
            num_classes,
            conv_kinds: [ConvKind::FPConv; 4],
            task: Task::Segmentation,
            input_channels: 9,
            n_max: 16,
            downsample_ratio: 0.25,
            k_upsample: 3,
            d_g: 64,
            eps: 1e-5,
            slope: 0.1,
        }
    }

    pub fn classification(num_classes: usize) -> Self {
        NetConfig {
            input_channels: 6,
            task: Task::Classification,
            ..Self::segmentation(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.widths.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Config(format!(
                    "widths must be non-decreasing, got {:?}",
                    self.widths
                )));
            }
        }
        if self.widths.iter().any(|&w| w == 0) || self.num_classes == 0 {
            return Err(Error::Config("widths and num_classes must be positive".into()));
        }
        if !(self.downsample_ratio > 0.0 && self.downsample_ratio <= 1.0) {
            return Err(Error::Config("downsample_ratio must be in (0,1]".into()));
        }
        Ok(())
    }

    fn block_spec(&self, level: usize) -> BlockSpec {
        let d_in = if level == 0 {
            self.widths[0]
        } else {
            self.widths[level - 1]
        };
        let d_out = self.widths[level];
        BlockSpec {
            d_in,
            d_mid: (d_out / 2).max(1),
            d_out,
            radius: self.base_radius * (1 << level) as f64,
            n_max: self.n_max,
            downsample: Some(self.downsample_ratio),
            kind: self.conv_kinds[level],
        }
    }
}

fn build_encoder<T: Scalar>(
    config: &NetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SharedMlp<T>, Vec<ResidualBlock<T>>)> {
    let stem = SharedMlp::new(&[config.input_channels, config.widths[0]], false, config.slope, rng);
    let mut enc = Vec::with_capacity(4);
    for level in 0..4 {
        enc.push(ResidualBlock::new(
            config.block_spec(level),
            config.plane,
            config.norm,
            config.d_g,
            config.eps,
            config.slope,
            rng,
        )?);
    }
    Ok((stem, enc))
}

/// Encoder-decoder for per-point labels: 4 downsampling residual levels,
/// 4 KNN-upsampling levels with skip connections, and a plain linear
/// classifier on top.
pub struct SegmentationNet<T: Scalar> {
    pub config: NetConfig,
    pub stem: SharedMlp<T>,
    pub enc: Vec<ResidualBlock<T>>,
    pub dec: Vec<SharedMlp<T>>,
    pub classifier: Linear<T>,
}

impl<T: Scalar> SegmentationNet<T> {
    pub fn new(config: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (stem, enc) = build_encoder(&config, rng)?;
        let w = &config.widths;
        // decoder level i fuses the upsampled deeper feature with skip i
        let dec_widths: [(usize, usize); 4] = [
            (w[3] + w[2], w[2]),
            (w[2] + w[1], w[1]),
            (w[1] + w[0], w[0]),
            (w[0] + w[0], w[0]),
        ];
        let dec = dec_widths
            .iter()
            .map(|&(c_in, c_out)| SharedMlp::new(&[c_in, c_out], false, config.slope, rng))
            .collect();
        let classifier = Linear::new(w[0], config.num_classes, rng);
        Ok(SegmentationNet {
            config,
            stem,
            enc,
            dec,
            classifier,
        })
    }

    /// Per-point logits `[N, num_classes]`.
    pub fn forward(
        &self,
        positions: &[Point],
        features: &Tensor<T>,
        train: bool,
        seed: u64,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_with_penultimate(positions, features, train, seed)?.0)
    }

    /// Logits plus the last decoder features (the fusion tap point).
    pub fn forward_with_penultimate(
        &self,
        positions: &[Point],
        features: &Tensor<T>,
        train: bool,
        seed: u64,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = positions.len();
        if features.shape() != [n, self.config.input_channels] {
            return Err(Error::shape(
                "forward_segmentation",
                format!("[{n},{}]", self.config.input_channels),
                format!("{:?}", features.shape()),
            ));
        }
        let f0 = self.stem.forward(features, train)?;
        let mut skip_positions: Vec<Vec<Point>> = vec![positions.to_vec()];
        let mut skip_feats: Vec<Tensor<T>> = vec![f0];
        for (level, block) in self.enc.iter().enumerate() {
            let (pts, feats) = block.forward(
                &skip_positions[level],
                &skip_feats[level],
                train,
                seed ^ ((level as u64 + 1) << 8),
            )?;
            skip_positions.push(pts);
            skip_feats.push(feats);
        }

        let mut h = skip_feats[4].clone();
        for (j, dec) in self.dec.iter().enumerate() {
            let deep_level = 4 - j;
            let up = knn_upsample(
                &skip_positions[deep_level],
                &h,
                &skip_positions[deep_level - 1],
                self.config.k_upsample.min(skip_positions[deep_level].len()),
            )?;
            let cat = op::concat_last(&up, &skip_feats[deep_level - 1])?;
            h = dec.forward(&cat, train)?;
        }
        let logits = self.classifier.forward(&h)?;
        Ok((logits, h))
    }

    pub fn penultimate_width(&self) -> usize {
        self.config.widths[0]
    }
}

impl<T: Scalar> Layer<T> for SegmentationNet<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.stem.collect(&format!("{prefix}.stem"), out);
        for (i, b) in self.enc.iter().enumerate() {
            b.collect(&format!("{prefix}.enc{i}"), out);
        }
        for (i, d) in self.dec.iter().enumerate() {
            d.collect(&format!("{prefix}.dec{i}"), out);
        }
        self.classifier.collect(&format!("{prefix}.cls"), out);
    }
}

/// Encoder plus global max pooling and a fully connected head.
pub struct ClassificationNet<T: Scalar> {
    pub config: NetConfig,
    pub stem: SharedMlp<T>,
    pub enc: Vec<ResidualBlock<T>>,
    pub head: SharedMlp<T>,
    pub classifier: Linear<T>,
}

impl<T: Scalar> ClassificationNet<T> {
    pub fn new(config: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (stem, enc) = build_encoder(&config, rng)?;
        let w3 = config.widths[3];
        let head = SharedMlp::new(&[w3, w3 / 2], false, config.slope, rng);
        let classifier = Linear::new(w3 / 2, config.num_classes, rng);
        Ok(ClassificationNet {
            config,
            stem,
            enc,
            head,
            classifier,
        })
    }

    /// Shape-level logits `[num_classes]`.
    pub fn forward(
        &self,
        positions: &[Point],
        features: &Tensor<T>,
        train: bool,
        seed: u64,
    ) -> Result<Tensor<T>> {
        let n = positions.len();
        if features.shape() != [n, self.config.input_channels] {
            return Err(Error::shape(
                "forward_classification",
                format!("[{n},{}]", self.config.input_channels),
                format!("{:?}", features.shape()),
            ));
        }
        let mut pts = positions.to_vec();
        let mut h = self.stem.forward(features, train)?;
        for (level, block) in self.enc.iter().enumerate() {
            let (p, f) = block.forward(&pts, &h, train, seed ^ ((level as u64 + 1) << 8))?;
            pts = p;
            h = f;
        }
        let (global, _) = op::max_reduce(&h)?; // [w3]
        let global = op::reshape(&global, &[1, self.config.widths[3]])?;
        let g = self.head.forward(&global, train)?;
        let logits = self.classifier.forward(&g)?;
        op::reshape(&logits, &[self.config.num_classes])
    }
}

impl<T: Scalar> Layer<T> for ClassificationNet<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.stem.collect(&format!("{prefix}.stem"), out);
        for (i, b) in self.enc.iter().enumerate() {
            b.collect(&format!("{prefix}.enc{i}"), out);
        }
        self.head.collect(&format!("{prefix}.head"), out);
        self.classifier.collect(&format!("{prefix}.cls"), out);
    }
}

/// Final-feature fusion: concatenate two networks' penultimate per-point
/// features under a small two-layer head.
pub struct FusionNet<T: Scalar> {
    pub net_a: SegmentationNet<T>,
    pub net_b: SegmentationNet<T>,
    pub head_hidden: SharedMlp<T>,
    pub head_out: Linear<T>,
}

impl<T: Scalar> FusionNet<T> {
    pub fn new(net_a: SegmentationNet<T>, net_b: SegmentationNet<T>, rng: &mut ChaCha8Rng) -> Self {
        let c = net_a.penultimate_width() + net_b.penultimate_width();
        let hidden = c / 2;
        let num_classes = net_a.config.num_classes;
        let head_hidden = SharedMlp::new(&[c, hidden], false, net_a.config.slope, rng);
        let head_out = Linear::new(hidden, num_classes, rng);
        FusionNet {
            net_a,
            net_b,
            head_hidden,
            head_out,
        }
    }

    pub fn forward(
        &self,
        positions: &[Point],
        features: &Tensor<T>,
        train: bool,
        seed: u64,
    ) -> Result<Tensor<T>> {
        let (_, pen_a) = self
            .net_a
            .forward_with_penultimate(positions, features, train, seed)?;
        let (_, pen_b) = self
            .net_b
            .forward_with_penultimate(positions, features, train, seed ^ 0xB0B)?;
        let cat = op::concat_last(&pen_a, &pen_b)?;
        let h = self.head_hidden.forward(&cat, train)?;
        self.head_out.forward(&h)
    }
}

impl<T: Scalar> Layer<T> for FusionNet<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.net_a.collect(&format!("{prefix}.a"), out);
        self.net_b.collect(&format!("{prefix}.b"), out);
        self.head_hidden.collect(&format!("{prefix}.fuse"), out);
        self.head_out.collect(&format!("{prefix}.fusecls"), out);
    }
}

/// Confusion matrix plus the three aggregates. Classes absent from both
/// prediction and truth are excluded from mIoU; mAcc averages recall over
/// classes with ground-truth support.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub confusion: Vec<u64>,
    pub num_classes: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub miou: f64,
    pub oa: f64,
    pub macc: f64,
}

pub fn compute_metrics(
    pred: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "compute_metrics",
            format!("{} predictions", truth.len()),
            format!("{}", pred.len()),
        ));
    }
    let mut confusion = vec![0u64; num_classes * num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: p as i64,
                num_classes,
            });
        }
        if t >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: t as i64,
                num_classes,
            });
        }
        confusion[t * num_classes + p] += 1;
    }
    let total: u64 = confusion.iter().sum();
    let mut per_class_iou = Vec::with_capacity(num_classes);
    let mut per_class_acc = Vec::with_capacity(num_classes);
    let mut trace = 0u64;
    for c in 0..num_classes {
        let tp = confusion[c * num_classes + c];
        trace += tp;
        let truth_count: u64 = (0..num_classes).map(|j| confusion[c * num_classes + j]).sum();
        let pred_count: u64 = (0..num_classes).map(|i| confusion[i * num_classes + c]).sum();
        let union = truth_count + pred_count - tp;
        per_class_iou.push(if union > 0 {
            Some(tp as f64 / union as f64)
        } else {
            None
        });
        per_class_acc.push(if truth_count > 0 {
            Some(tp as f64 / truth_count as f64)
        } else {
            None
        });
    }
    let mean_opt = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    Ok(MetricsReport {
        miou: mean_opt(&per_class_iou),
        macc: mean_opt(&per_class_acc),
        oa: if total > 0 { trace as f64 / total as f64 } else { 0.0 },
        confusion,
        num_classes,
        per_class_iou,
        per_class_acc,
    })
}

impl MetricsReport {
    /// CSV with header `class,iou,acc`, one row per class, then the three
    /// aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,acc\n");
        for c in 0..self.num_classes {
            let iou = self.per_class_iou[c].map_or(String::new(), |v| format!("{v:.6}"));
            let acc = self.per_class_acc[c].map_or(String::new(), |v| format!("{v:.6}"));
            out.push_str(&format!("{c},{iou},{acc}\n"));
        }
        out.push_str(&format!("miou,{:.6},\n", self.miou));
        out.push_str(&format!("oa,{:.6},\n", self.oa));
        out.push_str(&format!("macc,{:.6},\n", self.macc));
        out
    }
}
