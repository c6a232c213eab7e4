//! Propagation-reconstruction network: a patch encoder with a coordinate
//! head, a reconstruction decoder, and the self-supervised training loop
//! that teaches it relative positions between patches of the same volume.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, load_params, save_params, AdamConfig, AdamState, ForwardPass, Gradients, Layer, ModelParams,
    NetworkBuilder, NetworkSpec,
};
use crate::tensor::Tensor;
use crate::volume::{crop_patch, Volume3, Voxel};

pub type Vec3 = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PRNetConfig {
    /// Patch extent `(d, h, w)`; every axis divisible by 16.
    pub patch_size: [usize; 3],
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 4],
    /// Hidden width of the coordinate head; 0 maps pooled features straight to R³.
    pub head_width: usize,
    /// Offset bound in mm. `None` uses the largest physical diagonal of the
    /// training volumes.
    pub r: Option<f64>,
    pub leaky_slope: f64,
    /// Concatenate each encoder activation into the decoder block of the
    /// same resolution. Without them the late decoder maps only see the
    /// bottleneck and barely change under small shifts.
    pub skips: bool,
    /// Layer names whose center voxels give the two feature vectors.
    pub m2_tap: String,
    pub m4_tap: String,
}

impl Default for PRNetConfig {
    fn default() -> Self {
        Self {
            patch_size: [16, 32, 32],
            encoder_channels: [8, 16, 32, 64],
            decoder_channels: [32, 16, 8, 8],
            head_width: 0,
            r: None,
            leaky_slope: 0.1,
            skips: false,
            m2_tap: "dec2_conv".into(),
            m4_tap: "dec4_conv".into(),
        }
    }
}

impl PRNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size.iter().any(|&s| s == 0 || s % 16 != 0) {
            return Err(Error::Config(format!(
                "patch size {:?} must be a positive multiple of 16 per axis",
                self.patch_size
            )));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if let Some(r) = self.r {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("offset bound r must be > 0, got {r}")));
            }
        }
        Ok(())
    }

    pub fn build_spec(&self) -> Result<NetworkSpec> {
        self.validate()?;
        let [d, h, w] = self.patch_size;
        let act = Layer::LeakyRelu { slope: self.leaky_slope };
        let mut b = NetworkBuilder::new(vec![1, d, h, w]);

        let mut x = NetworkBuilder::INPUT;
        let mut ch = 1;
        let mut skips = Vec::new();
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            x = b.conv(format!("enc{}_conv", i + 1), x, ch, c, 3);
            x = b.add(format!("enc{}_act", i + 1), act.clone(), &[x]);
            skips.push((x, c));
            x = b.add(format!("enc{}_down", i + 1), Layer::Downsample2, &[x]);
            ch = c;
        }
        let bottom = x;

        let mut head = b.add("head_pool", Layer::GlobalAvgPool, &[bottom]);
        let mut feat = ch;
        if self.head_width > 0 {
            head = b.add(
                "head_fc",
                Layer::Dense {
                    in_features: feat,
                    out_features: self.head_width,
                },
                &[head],
            );
            head = b.add("head_act", act.clone(), &[head]);
            feat = self.head_width;
        }
        b.add(
            "coord",
            Layer::Dense {
                in_features: feat,
                out_features: 3,
            },
            &[head],
        );

        x = bottom;
        for (i, &c) in self.decoder_channels.iter().enumerate() {
            x = b.add(format!("dec{}_up", i + 1), Layer::Upsample2, &[x]);
            if self.skips {
                let (skip, sc) = skips[skips.len() - 1 - i];
                x = b.add(format!("dec{}_cat", i + 1), Layer::Concat, &[x, skip]);
                ch += sc;
            }
            x = b.conv(format!("dec{}_conv", i + 1), x, ch, c, 3);
            x = b.add(format!("dec{}_act", i + 1), act.clone(), &[x]);
            ch = c;
        }
        b.conv("recon", x, ch, 1, 1);
        b.tap(&self.m2_tap).tap(&self.m4_tap).output("coord").output("recon");
        b.build()
    }
}

/// The four items produced for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PRNetOutput {
    /// Predicted anatomical coordinate.
    pub p: Vec3,
    /// Reconstruction, same `(d, h, w)` shape as the patch.
    pub recon: Tensor,
    pub f2: Vec<f64>,
    pub f4: Vec<f64>,
}

/// Ground-truth offset `(c1 − c0) ∘ e` in mm.
pub fn gt_offset(c0: Voxel, c1: Voxel, e: Vec3) -> Vec3 {
    std::array::from_fn(|a| (c1[a] as f64 - c0[a] as f64) * e[a])
}

/// Bounded offset prediction `r · tanh(p0 − p1)`. Where tanh rounds to ±1
/// the result is pulled to the nearest float inside `(−r, r)`.
pub fn pred_offset(p0: Vec3, p1: Vec3, r: f64) -> Vec3 {
    std::array::from_fn(|a| {
        let d = r * (p0[a] - p1[a]).tanh();
        if d.abs() >= r {
            r.next_down().copysign(d)
        } else {
            d
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslLoss {
    pub ssl: f64,
    pub dis: f64,
    pub rec: f64,
}

/// Loss plus its derivatives with respect to both coordinates and both
/// reconstructions.
struct SslTerms {
    loss: SslLoss,
    dp0: Vec3,
    dp1: Vec3,
    drec0: Vec<f64>,
    drec1: Vec<f64>,
}

fn ssl_terms(p0: Vec3, p1: Vec3, rec0: &Tensor, rec1: &Tensor, x0: &Tensor, x1: &Tensor, d10: Vec3, r: f64) -> Result<SslTerms> {
    if rec0.len() != x0.len() || rec1.len() != x1.len() || x0.len() != x1.len() {
        return Err(Error::Shape(format!(
            "reconstruction/patch sizes disagree: {:?} {:?} {:?} {:?}",
            rec0.shape(),
            x0.shape(),
            rec1.shape(),
            x1.shape()
        )));
    }
    let n = x0.len() as f64;
    let mut dis = 0.0;
    let mut dp0 = [0.0; 3];
    for a in 0..3 {
        let t = (p0[a] - p1[a]).tanh();
        let err = r * t - d10[a];
        dis += err * err / 3.0;
        dp0[a] = 2.0 / 3.0 * err * r * (1.0 - t * t);
    }
    let dp1 = dp0.map(|g| -g);

    let sq = |(&a, &b): (&f64, &f64)| (b - a) * (b - a);
    let rec = nn::compensated_sum(
        rec0.data().iter().zip(x0.data()).map(sq).chain(rec1.data().iter().zip(x1.data()).map(sq)),
    ) / n;
    let grad = |xr: &Tensor, x: &Tensor| -> Vec<f64> {
        xr.data().iter().zip(x.data()).map(|(&a, &b)| 2.0 * (a - b) / n).collect()
    };
    let drec0 = grad(rec0, x0);
    let drec1 = grad(rec1, x1);
    Ok(SslTerms {
        loss: SslLoss {
            ssl: dis + rec,
            dis,
            rec,
        },
        dp0,
        dp1,
        drec0,
        drec1,
    })
}

/// Offset MSE plus reconstruction MSE of one patch pair.
pub fn ssl_loss(out0: &PRNetOutput, out1: &PRNetOutput, x0: &Tensor, x1: &Tensor, d10: Vec3, r: f64) -> Result<SslLoss> {
    Ok(ssl_terms(out0.p, out1.p, &out0.recon, &out1.recon, x0, x1, d10, r)?.loss)
}

fn center_features(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    let off = (d / 2 * h + h / 2) * w + w / 2;
    let per = d * h * w;
    (0..s[0]).map(|c| t.data()[c * per + off]).collect()
}

fn as_input(cfg: &PRNetConfig, patch: &Tensor) -> Result<Tensor> {
    if patch.shape() != cfg.patch_size {
        return Err(Error::Shape(format!(
            "patch shape {:?} does not match configured {:?}",
            patch.shape(),
            cfg.patch_size
        )));
    }
    let [d, h, w] = cfg.patch_size;
    patch.clone().reshape(vec![1, d, h, w])
}

fn output_of(spec: &NetworkSpec, cfg: &PRNetConfig, pass: &ForwardPass) -> Result<PRNetOutput> {
    let c = pass.output(spec, "coord")?.data();
    let recon = pass.output(spec, "recon")?.clone().reshape(cfg.patch_size.to_vec())?;
    Ok(PRNetOutput {
        p: [c[0], c[1], c[2]],
        recon,
        f2: center_features(pass.output(spec, &cfg.m2_tap)?),
        f4: center_features(pass.output(spec, &cfg.m4_tap)?),
    })
}

pub fn prnet_forward(spec: &NetworkSpec, params: &ModelParams, cfg: &PRNetConfig, patch: &Tensor) -> Result<PRNetOutput> {
    let pass = nn::forward(spec, params, &as_input(cfg, patch)?)?;
    output_of(spec, cfg, &pass)
}

/// A network together with its configuration and resolved offset bound.
#[derive(Clone, Debug)]
pub struct PRNet {
    pub config: PRNetConfig,
    pub r: f64,
    pub spec: NetworkSpec,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct PRNetMeta {
    config: PRNetConfig,
    r: f64,
}

impl PRNet {
    pub fn new(config: PRNetConfig, r: f64, seed: u64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Config(format!("offset bound r must be > 0, got {r}")));
        }
        let spec = config.build_spec()?;
        let params = ModelParams::init(&spec, seed);
        Ok(Self {
            config,
            r,
            spec,
            params,
        })
    }

    pub fn forward(&self, patch: &Tensor) -> Result<PRNetOutput> {
        prnet_forward(&self.spec, &self.params, &self.config, patch)
    }

    /// Crops the configured patch around `center` and runs the network.
    pub fn encode(&self, volume: &Volume3, center: Voxel) -> Result<PRNetOutput> {
        self.forward(&crop_patch(volume, center, self.config.patch_size)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_params(dir, &self.spec, &self.params)?;
        let meta = PRNetMeta {
            config: self.config.clone(),
            r: self.r,
        };
        fs::write(dir.join("prnet.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("prnet.json");
        let meta: PRNetMeta = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        let (spec, params) = load_params(dir)?;
        if spec != meta.config.build_spec()? {
            return Err(Error::format(&path, "stored network does not match its config"));
        }
        Ok(Self {
            config: meta.config,
            r: meta.r,
            spec,
            params,
        })
    }

    /// L_ssl and parameter gradients for one patch pair; `d10` is the
    /// displacement (mm) that carries `c1` onto `c0`.
    pub fn pair_loss(&self, params: &ModelParams, x0: &Tensor, x1: &Tensor, d10: Vec3) -> Result<(SslLoss, Gradients)> {
        let pass0 = nn::forward(&self.spec, params, &as_input(&self.config, x0)?)?;
        let pass1 = nn::forward(&self.spec, params, &as_input(&self.config, x1)?)?;
        let o0 = output_of(&self.spec, &self.config, &pass0)?;
        let o1 = output_of(&self.spec, &self.config, &pass1)?;
        let t = ssl_terms(o0.p, o1.p, &o0.recon, &o1.recon, x0, x1, d10, self.r)?;
        let [d, h, w] = self.config.patch_size;
        let mut grads = Gradients::zeros_like(params);
        for (pass, dp, drec) in [(&pass0, t.dp0, t.drec0), (&pass1, t.dp1, t.drec1)] {
            let gp = Tensor::from_vec(dp.to_vec());
            let gr = Tensor::new(vec![1, d, h, w], drec)?;
            let g = nn::backward(&self.spec, params, pass, &[("coord", &gp), ("recon", &gr)])?;
            grads.accumulate(&g)?;
        }
        Ok((t.loss, grads))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrnetTrainConfig {
    /// Patch pairs per optimizer step.
    pub batch: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PrnetTrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            epochs: 10,
            iters_per_epoch: 16,
            adam: AdamConfig::default(),
            seed: 11,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslEpochLog {
    pub epoch: usize,
    pub dis: f64,
    pub rec: f64,
    pub ssl: f64,
}

/// One training pair drawn from a single volume.
#[derive(Clone, Debug)]
pub struct SslBatchSample {
    pub volume: usize,
    pub c0: Voxel,
    pub c1: Voxel,
    pub x0: Tensor,
    pub x1: Tensor,
    pub d10: Vec3,
}

fn random_voxel<R: Rng>(shape: [usize; 3], rng: &mut R) -> Voxel {
    std::array::from_fn(|a| rng.gen_range(0..shape[a]))
}

pub fn sample_pair<R: Rng>(volumes: &[Volume3], patch: [usize; 3], rng: &mut R) -> Result<SslBatchSample> {
    let volume = rng.gen_range(0..volumes.len());
    let v = &volumes[volume];
    let c0 = random_voxel(v.shape(), rng);
    let c1 = random_voxel(v.shape(), rng);
    Ok(SslBatchSample {
        volume,
        c0,
        c1,
        x0: crop_patch(v, c0, patch)?,
        x1: crop_patch(v, c1, patch)?,
        // displacement carrying c1 onto c0, the quantity localization applies
        d10: gt_offset(c1, c0, v.spacing()),
    })
}

/// Self-supervised training on unlabeled volumes. Returns the trained
/// network and the per-epoch mean losses.
pub fn train_prnet(volumes: &[Volume3], cfg: &PRNetConfig, tc: &PrnetTrainConfig) -> Result<(PRNet, Vec<SslEpochLog>)> {
    if volumes.is_empty() {
        return Err(Error::Config("PRNet training needs at least one volume".into()));
    }
    if tc.batch == 0 || tc.epochs == 0 || tc.iters_per_epoch == 0 {
        return Err(Error::Config("batch, epochs and iters_per_epoch must be positive".into()));
    }
    for v in volumes {
        if (0..3).any(|a| cfg.patch_size[a] > 2 * v.shape()[a]) {
            return Err(Error::Config(format!(
                "patch {:?} too large for volume {:?}",
                cfg.patch_size,
                v.shape()
            )));
        }
    }
    let r = cfg
        .r
        .unwrap_or_else(|| volumes.iter().map(Volume3::diagonal_mm).fold(0.0, f64::max));
    let mut net = PRNet::new(cfg.clone(), r, tc.seed)?;
    let mut adam = AdamState::new(tc.adam.clone(), &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0001);
    let mut logs = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        adam.set_epoch(epoch);
        let mut sum = SslLoss {
            ssl: 0.0,
            dis: 0.0,
            rec: 0.0,
        };
        for iter in 0..tc.iters_per_epoch {
            let mut grads = Gradients::zeros_like(&net.params);
            for _ in 0..tc.batch {
                let s = sample_pair(volumes, cfg.patch_size, &mut rng)?;
                let (loss, g) = net.pair_loss(&net.params, &s.x0, &s.x1, s.d10)?;
                if !loss.ssl.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "L_ssl = {} at epoch {epoch}, iteration {iter} (volume {}, c0 {:?}, c1 {:?})",
                        loss.ssl, s.volume, s.c0, s.c1
                    )));
                }
                sum.ssl += loss.ssl;
                sum.dis += loss.dis;
                sum.rec += loss.rec;
                grads.accumulate(&g)?;
            }
            grads.scale(1.0 / tc.batch as f64);
            adam.step(&mut net.params, &grads)?;
        }
        let k = (tc.batch * tc.iters_per_epoch) as f64;
        let log = SslEpochLog {
            epoch: epoch + 1,
            dis: sum.dis / k,
            rec: sum.rec / k,
            ssl: sum.ssl / k,
        };
        info!(
            "prnet epoch {}: L_dis {:.4} L_rec {:.5} L_ssl {:.4}",
            log.epoch, log.dis, log.rec, log.ssl
        );
        logs.push(log);
    }
    Ok((net, logs))
}

pub fn ssl_log_csv(logs: &[SslEpochLog]) -> String {
    let mut s = String::from("epoch,L_dis,L_rec,L_ssl\n");
    for l in logs {
        let _ = writeln!(s, "{},{},{},{}", l.epoch, l.dis, l.rec, l.ssl);
    }
    s
}
