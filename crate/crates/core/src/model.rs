//! The full enhancement network.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BlockConfig, Hfe, Hrf, RegionalSelection};
use crate::error::{Error, Result};
use crate::event::{read_events, voxelize, VoxelGrid, DEFAULT_BINS};
use crate::image::{read_image, write_image, ImageTensor};
use crate::layers::{Conv, Deconv};
use crate::lightup::{light_up, snr_map, snr_pyramid, Estimator, SnrMap, DEFAULT_SNR_KERNEL, DEFAULT_TAU};
use crate::numerics::{checkpoint, concat, Graph, ParamBuilder, ParamStore, Tensor, Var};

/// Spatial extents must be multiples of this.
pub const EXTENT_MULTIPLE: usize = 4;
/// Percentile of nonzero `|voxel|` values that the grid is divided by.
pub const VOXEL_PERCENTILE: f64 = 0.98;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub blocks: BlockConfig,
    pub bins: usize,
    pub tau: f64,
    pub snr_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: BlockConfig::default(),
            bins: DEFAULT_BINS,
            tau: DEFAULT_TAU,
            snr_kernel: DEFAULT_SNR_KERNEL,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvLightModel {
    pub config: ModelConfig,
    pub estimator: Estimator,
    pub stem_img: Conv,
    pub stem_ev: Conv,
    pub down_img: [Conv; 2],
    pub down_ev: [Conv; 2],
    pub irfs: [RegionalSelection; 3],
    pub erfs: [RegionalSelection; 3],
    pub fuse: Conv,
    pub encoder: [Hfe; 2],
    pub encoder_down: [Conv; 2],
    pub bottleneck: Hfe,
    pub hrf: [Hrf; 3],
    pub decoder: [Hfe; 2],
    pub up: [Deconv; 2],
    pub head: Conv,
}

/// Everything a forward pass produces.
pub struct Forward<'g> {
    pub enhanced: Var<'g>,
    pub lit: Var<'g>,
    pub illumination: Var<'g>,
    pub snr: SnrMap,
}

fn down<R: Rng>(b: &mut ParamBuilder<'_, R>, cin: usize) -> Result<Conv> {
    Conv::new(b, cin, 2 * cin, 4, 2, 1)
}

impl EvLightModel {
    pub fn new<R: Rng>(config: ModelConfig, b: &mut ParamBuilder<'_, R>) -> Result<Self> {
        config.blocks.validate()?;
        if config.bins < 2 {
            return Err(Error::invalid("the voxel grid needs at least two bins"));
        }
        let bc = config.blocks;
        let c = |s| bc.channels(s);
        let pair = |b: &mut ParamBuilder<'_, R>, name: &str| -> Result<[Conv; 2]> {
            let mut sb = b.sub(name);
            Ok([down(&mut sb.sub(0), c(0))?, down(&mut sb.sub(1), c(1))?])
        };
        let triple = |b: &mut ParamBuilder<'_, R>, name: &str| -> Result<[RegionalSelection; 3]> {
            let mut sb = b.sub(name);
            Ok([
                RegionalSelection::new(&mut sb.sub(0), c(0), bc.eca_kernel)?,
                RegionalSelection::new(&mut sb.sub(1), c(1), bc.eca_kernel)?,
                RegionalSelection::new(&mut sb.sub(2), c(2), bc.eca_kernel)?,
            ])
        };
        let estimator = Estimator::new(&mut b.sub("estimator"))?;
        let stem_img = Conv::same(&mut b.sub("stem_img"), 3, c(0), 3)?;
        let stem_ev = Conv::same(&mut b.sub("stem_ev"), config.bins, c(0), 3)?;
        let down_img = pair(b, "down_img")?;
        let down_ev = pair(b, "down_ev")?;
        let irfs = triple(b, "irfs")?;
        let erfs = triple(b, "erfs")?;
        let fuse = Conv::same(&mut b.sub("fuse"), 2 * c(0), c(0), 1)?;
        let mut eb = b.sub("encoder");
        let encoder = [Hfe::new(&mut eb.sub(0), c(0), bc.heads)?, Hfe::new(&mut eb.sub(1), c(1), bc.heads)?];
        let encoder_down = pair(b, "encoder_down")?;
        let bottleneck = Hfe::new(&mut b.sub("bottleneck"), c(2), bc.heads)?;
        let mut hb = b.sub("hrf");
        let hrf = [
            Hrf::new(&mut hb.sub(0), c(0))?,
            Hrf::new(&mut hb.sub(1), c(1))?,
            Hrf::new(&mut hb.sub(2), c(2))?,
        ];
        // decoder[s] refines scale s+1 before it is upsampled to scale s
        let mut db = b.sub("decoder");
        let decoder = [Hfe::new(&mut db.sub(0), c(1), bc.heads)?, Hfe::new(&mut db.sub(1), c(2), bc.heads)?];
        let mut ub = b.sub("up");
        let up = [Deconv::new(&mut ub.sub(0), c(1), c(0))?, Deconv::new(&mut ub.sub(1), c(2), c(1))?];
        let head = Conv::same(&mut b.sub("head"), c(0), 3, 3)?;
        Ok(Self {
            config,
            estimator,
            stem_img,
            stem_ev,
            down_img,
            down_ev,
            irfs,
            erfs,
            fuse,
            encoder,
            encoder_down,
            bottleneck,
            hrf,
            decoder,
            up,
            head,
        })
    }

    /// A fresh model and its parameters from a seed.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(config, &mut ParamBuilder::new(&mut store, &mut rng))?;
        Ok((model, store))
    }

    /// Runs the network. `snr_override` replaces the map computed from the lit-up image.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        img: &ImageTensor,
        grid: &VoxelGrid,
        snr_override: Option<&SnrMap>,
    ) -> Result<Forward<'g>> {
        let (h, w) = (img.height(), img.width());
        if img.channels() != 3 {
            return Err(Error::dim("forward", "2 (channels)", 3, img.channels()));
        }
        if h % EXTENT_MULTIPLE != 0 || w % EXTENT_MULTIPLE != 0 {
            return Err(Error::invalid(format!(
                "input extent {h}x{w} is not a multiple of {EXTENT_MULTIPLE}; pad it reflectively first"
            )));
        }
        if grid.bins() != self.config.bins {
            return Err(Error::dim("forward", "0 (bins)", self.config.bins, grid.bins()));
        }
        if (grid.height(), grid.width()) != (h, w) {
            return Err(Error::invalid(format!(
                "voxel grid is {}x{} but the image is {h}x{w}",
                grid.height(),
                grid.width()
            )));
        }

        let (lit, illumination) = light_up(g, store, &self.estimator, g.constant(img.tensor().clone()))?;
        let snr = match snr_override {
            Some(m) => {
                if (m.height(), m.width()) != (h, w) {
                    return Err(Error::invalid("SNR override does not match the image extent"));
                }
                m.clone()
            }
            None => snr_map(&lit.value(), self.config.snr_kernel, self.config.tau)?,
        };
        let masks = snr_pyramid(&snr, BlockConfig::SCALES)?;

        let ev = g.constant(normalize_voxels(grid.to_hwc()));
        let mut f_img = vec![self.stem_img.forward(g, store, lit)?];
        let mut f_ev = vec![self.stem_ev.forward(g, store, ev)?];
        for s in 0..2 {
            f_img.push(self.down_img[s].forward(g, store, f_img[s])?);
            f_ev.push(self.down_ev[s].forward(g, store, f_ev[s])?);
        }
        let mut sel_img = Vec::with_capacity(3);
        let mut sel_ev = Vec::with_capacity(3);
        for s in 0..3 {
            sel_img.push(self.irfs[s].irfs(g, store, f_img[s], &masks[s].binary)?);
            sel_ev.push(self.erfs[s].erfs(g, store, f_ev[s], &masks[s].binary)?);
        }

        // events reach the holistic branch only where the image is not trusted
        let ev_in = f_ev[0].mul_spatial(g.constant(masks[0].complement()))?.add_scalar(0.0)?;
        let x = self.fuse.forward(g, store, concat(&[f_img[0], ev_in], 2)?)?;
        let e0 = self.encoder[0].forward(g, store, x)?;
        let e1 = self.encoder[1].forward(g, store, self.encoder_down[0].forward(g, store, e0)?)?;
        let b = self.bottleneck.forward(g, store, self.encoder_down[1].forward(g, store, e1)?)?;

        let h2 = self.hrf[2].forward(g, store, sel_img[2], sel_ev[2], b)?;
        let u1 = self.up[1].forward(g, store, self.decoder[1].forward(g, store, h2)?)?.add(e1)?;
        let h1 = self.hrf[1].forward(g, store, sel_img[1], sel_ev[1], u1)?;
        let u0 = self.up[0].forward(g, store, self.decoder[0].forward(g, store, h1)?)?.add(e0)?;
        let h0 = self.hrf[0].forward(g, store, sel_img[0], sel_ev[0], u0)?;
        let enhanced = self.head.forward(g, store, h0)?.add(lit)?;
        Ok(Forward {
            enhanced,
            lit,
            illumination,
            snr,
        })
    }

    /// Pads to a multiple of four, runs the network, crops back and clamps to `[0, 1]`.
    pub fn enhance(&self, store: &ParamStore, img: &ImageTensor, grid: &VoxelGrid) -> Result<ImageTensor> {
        let (h, w) = (img.height(), img.width());
        let pad = |n: usize| (EXTENT_MULTIPLE - n % EXTENT_MULTIPLE) % EXTENT_MULTIPLE;
        let (ph, pw) = (pad(h), pad(w));
        let img_p = ImageTensor::new(img.tensor().reflect_pad_hw(ph, pw)?)?;
        let grid_p = VoxelGrid::from_hwc(&grid.to_hwc().reflect_pad_hw(ph, pw)?)?;
        let g = Graph::new();
        let out = self.forward(&g, store, &img_p, &grid_p, None)?;
        let cropped = out.enhanced.value().crop_hw(0, 0, h, w)?;
        Ok(ImageTensor::new(cropped)?.clamped())
    }
}

/// Divides by the 98th percentile of nonzero magnitudes; an all-zero grid is returned as is.
pub fn normalize_voxels(t: Tensor) -> Tensor {
    let mut mags: Vec<f64> = t.data().iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
    if mags.is_empty() {
        return t;
    }
    mags.sort_by(f64::total_cmp);
    let idx = ((VOXEL_PERCENTILE * mags.len() as f64).ceil() as usize).clamp(1, mags.len()) - 1;
    let scale = mags[idx];
    t.map(|v| v / scale)
}

/// Voxel grid over the stream's own time span.
pub fn grid_for_image(events: &crate::event::EventStream, bins: usize) -> Result<VoxelGrid> {
    let t0 = events.events().first().map_or(0, |e| e.t);
    let t1 = events.events().last().map_or(1, |e| e.t).max(t0 + 1);
    voxelize(events, bins, t0, t1)
}

/// Reads an image, events and a checkpoint, enhances, and writes the result.
pub fn enhance_file(
    config: ModelConfig,
    img_path: &Path,
    event_path: &Path,
    ckpt_path: &Path,
    out_path: &Path,
) -> Result<ImageTensor> {
    let img = read_image(img_path)?;
    let events = read_events(event_path)?.stream;
    if (events.height() as usize, events.width() as usize) != (img.height(), img.width()) {
        return Err(Error::invalid(format!(
            "event sensor is {}x{} but the image is {}x{}",
            events.height(),
            events.width(),
            img.height(),
            img.width()
        )));
    }
    let grid = grid_for_image(&events, config.bins)?;
    let (model, mut store) = EvLightModel::seeded(config, 0)?;
    checkpoint::load_into(&mut store, ckpt_path)?;
    let out = model.enhance(&store, &img, &grid)?;
    write_image(&out, out_path)?;
    Ok(out)
}
