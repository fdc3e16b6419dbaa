//! Fixed, seeded stand-ins for the pretrained visual and semantic encoders.
//!
//! The visual stub embeds a group-structured slice of an instance's
//! attribute vector into every patch of an `r×r` grid and passes it through
//! frozen random residual mixing layers. The multi-scale adaptor then
//! derives the coarse (`r/2`) and fine (`2r`) grids. The semantic stub gives
//! every attribute a random embedding and runs it through a stack of frozen
//! mixer layers, one output per granularity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{mix64, AttributeTable, Sample};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Side of the native patch grid; `N_v = grid²`.
    pub grid: usize,
    /// Feature dimension `D`, shared by every granularity.
    pub dim: usize,
    /// Number of granularities `M` (1 to 3).
    pub granularities: usize,
    /// Frozen mixing layers applied after patch embedding.
    pub depth: usize,
    pub seed: u64,
    pub signal: f64,
    pub noise: f64,
    /// Scale of the semantic mixer weights; zero makes every layer the identity.
    pub mixer_scale: f64,
    /// Standard deviation of the per-attribute word embedding entries.
    pub embed_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            grid: 4,
            dim: 16,
            granularities: 3,
            depth: 2,
            seed: 1,
            signal: 1.0,
            noise: 0.3,
            mixer_scale: 0.5,
            embed_scale: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.grid % 2 != 0 {
            return Err(Error::Config(format!("grid side {} must be even and positive", self.grid)));
        }
        if !(1..=3).contains(&self.granularities) {
            return Err(Error::Config(format!("granularities {} must be 1, 2 or 3", self.granularities)));
        }
        if self.dim < 4 {
            return Err(Error::Config(format!("feature dim {} must be at least 4", self.dim)));
        }
        Ok(())
    }

    /// Grid sides of the granularities in use, coarse to fine.
    pub fn grid_sides(&self) -> Vec<usize> {
        let r = self.grid;
        match self.granularities {
            1 => vec![r],
            2 => vec![r / 2, r],
            _ => vec![r / 2, r, 2 * r],
        }
    }

    pub fn patch_counts(&self) -> Vec<usize> {
        self.grid_sides().iter().map(|s| s * s).collect()
    }
}

/// Paired visual and semantic inputs, one entry per granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularityBundle {
    pub visual: Vec<Tensor>,
    pub semantic: Vec<Tensor>,
}

pub struct Backbone {
    cfg: BackboneConfig,
    group_of: Vec<usize>,
    num_groups: usize,
    projection: Tensor,
    positions: Tensor,
    mixing: Vec<Tensor>,
    attribute_embedding: Tensor,
    token_mix: Vec<Tensor>,
    channel_mix: Vec<Tensor>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: [usize; 2], std: f64) -> Tensor {
    let n = shape[0] * shape[1];
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, table: &AttributeTable) -> Result<Self> {
        cfg.validate()?;
        let n_s = table.num_attributes();
        let h = table.num_groups();
        let d = cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed));
        let projection = gaussian(&mut rng, [n_s, d], (h as f64 / n_s as f64).sqrt());
        let positions = gaussian(&mut rng, [cfg.grid * cfg.grid, d], 0.1);
        let mixing = (0..cfg.depth).map(|_| gaussian(&mut rng, [d, d], 1.0 / (d as f64).sqrt())).collect();
        let attribute_embedding = gaussian(&mut rng, [n_s, d], cfg.embed_scale);
        let m = cfg.granularities;
        let token_mix = (0..m)
            .map(|_| gaussian(&mut rng, [n_s, n_s], cfg.mixer_scale / (n_s as f64).sqrt()))
            .collect();
        let channel_mix = (0..m)
            .map(|_| gaussian(&mut rng, [d, d], cfg.mixer_scale / (d as f64).sqrt()))
            .collect();
        Ok(Backbone {
            group_of: table.group_of(),
            num_groups: h,
            projection,
            positions,
            mixing,
            attribute_embedding,
            token_mix,
            channel_mix,
            cfg,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Native-resolution patch features (`grid² × D`) for one sample.
    ///
    /// Patch `p` carries the attributes of group `p mod ℏ`, scaled by the
    /// signal strength, plus a fixed positional code and per-instance clutter
    /// of standard deviation `noise`.
    pub fn extract_visual(&self, sample: &Sample, table: &AttributeTable) -> Tensor {
        let cfg = &self.cfg;
        let d = cfg.dim;
        let n_v = cfg.grid * cfg.grid;
        let x = sample.attributes(table, cfg.noise);
        let mut clutter = ChaCha8Rng::seed_from_u64(mix64(sample.image_seed ^ 0x5EED_C1A7));

        let mut data = vec![0.0; n_v * d];
        for (p, row) in data.chunks_mut(d).enumerate() {
            let g = p % self.num_groups;
            for (a, &xa) in x.iter().enumerate() {
                if self.group_of[a] != g || xa == 0.0 {
                    continue;
                }
                let w = cfg.signal * xa;
                for (r, pv) in row.iter_mut().zip(self.projection.row(a)) {
                    *r += w * pv;
                }
            }
            for (r, pos) in row.iter_mut().zip(self.positions.row(p)) {
                let z: f64 = clutter.sample(StandardNormal);
                *r += pos + cfg.noise * z;
            }
        }
        for w in &self.mixing {
            let mixed = kernels::matmul(&data, w.data(), n_v, d, d);
            for (v, m) in data.iter_mut().zip(mixed) {
                *v += 0.5 * m.tanh();
            }
        }
        Tensor::new([n_v, d], data).expect("grid features")
    }

    /// Upper bound on the row norm of noiseless visual features.
    pub fn feature_norm_bound(&self, table: &AttributeTable) -> f64 {
        let proj_fro = self.projection.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let max_pos = (0..self.positions.shape()[0])
            .map(|p| kernels::norm(self.positions.row(p)))
            .fold(0.0, f64::max);
        let x_max = (table.num_attributes() as f64).sqrt();
        self.cfg.signal.abs() * x_max * proj_fro + max_pos + self.cfg.depth as f64 * 0.5 * (self.cfg.dim as f64).sqrt()
    }

    /// Visual pyramid for the granularities in use, coarse to fine.
    pub fn visual_pyramid(&self, sample: &Sample, table: &AttributeTable) -> Result<Vec<Tensor>> {
        let base = self.extract_visual(sample, table);
        let [coarse, native, fine] = multi_scale_adapt(&base, self.cfg.grid)?;
        Ok(match self.cfg.granularities {
            1 => vec![native],
            2 => vec![coarse, native],
            _ => vec![coarse, native, fine],
        })
    }

    /// Semantic features `S^g` (`N_s × D`), one per granularity. Layer `g`
    /// maps `S ← S + GELU(T_g·S)·C_g`.
    pub fn embed_semantics(&self) -> Vec<Tensor> {
        let mut s = self.attribute_embedding.clone();
        let mut out = Vec::with_capacity(self.cfg.granularities);
        for (t, c) in self.token_mix.iter().zip(&self.channel_mix) {
            let mixed = t.matmul(&s).expect("token mix").gelu().matmul(c).expect("channel mix");
            s = s.add(&mixed).expect("same shape");
            out.push(s.clone());
        }
        out
    }

    pub fn attribute_embedding(&self) -> &Tensor {
        &self.attribute_embedding
    }

    pub fn bundle(&self, sample: &Sample, table: &AttributeTable) -> Result<GranularityBundle> {
        Ok(GranularityBundle {
            visual: self.visual_pyramid(sample, table)?,
            semantic: self.embed_semantics(),
        })
    }
}

/// Coarse (2×2 mean pool), native and fine (2× nearest-neighbour) versions
/// of an `r×r` patch grid with `D` channels.
pub fn multi_scale_adapt(base: &Tensor, grid: usize) -> Result<[Tensor; 3]> {
    if grid == 0 || grid % 2 != 0 {
        return Err(Error::Config(format!("grid side {grid} must be even")));
    }
    let (n_v, d) = base.dims2()?;
    if n_v != grid * grid {
        return Err(Error::Shape {
            op: "multi_scale_adapt",
            lhs: base.shape().to_vec(),
            rhs: vec![grid * grid, d],
        });
    }
    let x = base.data();
    let half = grid / 2;
    let mut coarse = vec![0.0; half * half * d];
    for i in 0..half {
        for j in 0..half {
            let dst = &mut coarse[(i * half + j) * d..(i * half + j + 1) * d];
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = (2 * i + di) * grid + 2 * j + dj;
                for (o, v) in dst.iter_mut().zip(&x[p * d..(p + 1) * d]) {
                    *o += 0.25 * v;
                }
            }
        }
    }
    let double = 2 * grid;
    let mut fine = vec![0.0; double * double * d];
    for i in 0..double {
        for j in 0..double {
            let p = (i / 2) * grid + j / 2;
            fine[(i * double + j) * d..(i * double + j + 1) * d].copy_from_slice(&x[p * d..(p + 1) * d]);
        }
    }
    Ok([
        Tensor::new([half * half, d], coarse)?,
        base.clone(),
        Tensor::new([double * double, d], fine)?,
    ])
}
