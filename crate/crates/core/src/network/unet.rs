use candle_core::Tensor;

use super::config::ModelConfig;
use crate::blocks::{DownBlock, McaBlock, McaDims, RsiBlock, SiBlock, UpBlock};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder};

/// Output shape of one stage, `(name, channels, height, width)`.
pub type StageShape = (&'static str, usize, usize, usize);

pub const STAGE_NAMES: [&str; 11] = [
    "conv_in", "down1", "mca1", "mca2", "down2", "mca3", "up1", "si1", "si2", "up2", "conv_out",
];

/// Conditioning computed once per forward pass.
pub struct Conditions<'a> {
    pub time: &'a Tensor,
    pub style: &'a Tensor,
    /// Content features at 1/2, 1/4, 1/8 resolution.
    pub content: &'a [Tensor],
    /// Structure maps of the reference at 1/2 and 1/4 resolution.
    pub structure: &'a [Tensor],
}

#[derive(Clone, Debug)]
pub struct UNet {
    conv_in: Conv2d,
    down1: Vec<DownBlock>,
    mca1: Vec<McaBlock>,
    mca2: Vec<McaBlock>,
    down2: Vec<DownBlock>,
    mca3: Vec<McaBlock>,
    up1: Vec<UpBlock>,
    rsi_quarter: RsiBlock,
    merge_quarter: Conv2d,
    si1: Vec<SiBlock>,
    rsi_half: RsiBlock,
    merge_half: Conv2d,
    si2: Vec<SiBlock>,
    up2: Vec<UpBlock>,
    conv_out: Conv2d,
}

/// Builds `n` blocks; the first changes width, the last changes resolution.
fn stage<B>(n: usize, c_in: usize, c_out: usize, mut make: impl FnMut(usize, usize, usize, bool) -> Result<B>) -> Result<Vec<B>> {
    (0..n)
        .map(|i| make(i, if i == 0 { c_in } else { c_out }, c_out, i + 1 == n))
        .collect()
}

impl UNet {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let [c0, c1, c2, c3] = cfg.unet_channels;
        let [f1, f2, f3] = cfg.content_channels;
        let r = cfg.stage_repeats;
        let (td, sd, heads) = (cfg.time_dim, cfg.style_dim, cfg.heads);
        let mca = |name: &'static str, content: usize| {
            move |i: usize, c_in: usize, c_out: usize, last: bool, down: bool| {
                McaBlock::new(
                    &pb.pp(name).pp(i.to_string()),
                    McaDims {
                        in_channels: c_in,
                        content_channels: content,
                        out_channels: c_out,
                        style_dim: sd,
                        time_dim: td,
                        heads,
                        downsample: down && last,
                    },
                )
            }
        };
        let (m1, m2, m3) = (mca("mca1", f1), mca("mca2", f2), mca("mca3", f3));
        Ok(Self {
            conv_in: Conv2d::new(&pb.pp("conv_in"), 3, c0, 3, 1)?,
            down1: stage(r[0], c0, c0, |i, a, b, last| DownBlock::new(&pb.pp("down1").pp(i.to_string()), a, b, td, last))?,
            mca1: stage(r[1], c0, c1, |i, a, b, last| m1(i, a, b, last, true))?,
            mca2: stage(r[2], c1, c2, |i, a, b, last| m2(i, a, b, last, true))?,
            down2: stage(r[3], c2, c3, |i, a, b, _| DownBlock::new(&pb.pp("down2").pp(i.to_string()), a, b, td, false))?,
            mca3: stage(r[4], c3, c3, |i, a, b, last| m3(i, a, b, last, false))?,
            up1: stage(r[5], c3, c2, |i, a, b, last| UpBlock::new(&pb.pp("up1").pp(i.to_string()), a, b, td, last))?,
            rsi_quarter: RsiBlock::new(&pb.pp("rsi_quarter"), c1, f2)?,
            merge_quarter: Conv2d::new(&pb.pp("merge_quarter"), c2 + c1, c2, 1, 1)?,
            si1: stage(r[6], c2, c2, |i, a, b, last| SiBlock::new(&pb.pp("si1").pp(i.to_string()), a, b, sd, td, heads, last))?,
            rsi_half: RsiBlock::new(&pb.pp("rsi_half"), c0, f1)?,
            merge_half: Conv2d::new(&pb.pp("merge_half"), c2 + c0, c2, 1, 1)?,
            si2: stage(r[7], c2, c1, |i, a, b, last| SiBlock::new(&pb.pp("si2").pp(i.to_string()), a, b, sd, td, heads, last))?,
            up2: stage(r[8], c1, c0, |i, a, b, _| UpBlock::new(&pb.pp("up2").pp(i.to_string()), a, b, td, false))?,
            conv_out: Conv2d::new(&pb.pp("conv_out"), c0, 3, 3, 1)?,
        })
    }

    /// Returns the noise prediction, the skip offsets `[quarter, half]`,
    /// and optionally records every stage's output shape.
    pub fn forward(
        &self,
        x: &Tensor,
        cond: &Conditions,
        mut trace: Option<&mut Vec<StageShape>>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut record = |name: &'static str, t: &Tensor| -> Result<()> {
            if let Some(tr) = trace.as_deref_mut() {
                let (_, c, h, w) = t.dims4()?;
                tr.push((name, c, h, w));
            }
            Ok(())
        };
        let temb = cond.time;
        let style = cond.style;
        let mut h = self.conv_in.forward(x)?;
        record("conv_in", &h)?;
        for b in &self.down1 {
            h = b.forward(&h, temb)?;
        }
        record("down1", &h)?;
        let skip_half = h.clone();
        for b in &self.mca1 {
            h = b.forward(&h, &cond.content[0], style, temb)?;
        }
        record("mca1", &h)?;
        let skip_quarter = h.clone();
        for b in &self.mca2 {
            h = b.forward(&h, &cond.content[1], style, temb)?;
        }
        record("mca2", &h)?;
        for b in &self.down2 {
            h = b.forward(&h, temb)?;
        }
        record("down2", &h)?;
        for b in &self.mca3 {
            h = b.forward(&h, &cond.content[2], style, temb)?;
        }
        record("mca3", &h)?;
        for b in &self.up1 {
            h = b.forward(&h, temb)?;
        }
        record("up1", &h)?;

        let (deformed, off_quarter) = self.rsi_quarter.forward(&skip_quarter, &cond.structure[1])?;
        h = self.merge_quarter.forward(&concat_skip("si1", &h, &deformed)?)?;
        for b in &self.si1 {
            h = b.forward(&h, style, temb)?;
        }
        record("si1", &h)?;
        let (deformed, off_half) = self.rsi_half.forward(&skip_half, &cond.structure[0])?;
        h = self.merge_half.forward(&concat_skip("si2", &h, &deformed)?)?;
        for b in &self.si2 {
            h = b.forward(&h, style, temb)?;
        }
        record("si2", &h)?;
        for b in &self.up2 {
            h = b.forward(&h, temb)?;
        }
        record("up2", &h)?;
        let out = self.conv_out.forward(&h)?;
        record("conv_out", &out)?;
        Ok((out, vec![off_quarter, off_half]))
    }
}

fn concat_skip(stage: &str, up: &Tensor, skip: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = up.dims4()?;
    let (_, _, hs, ws) = skip.dims4()?;
    if (h, w) != (hs, ws) {
        return Err(Error::shape(format!(
            "stage {stage}: up path is {h}x{w} but skip connection is {hs}x{ws}"
        )));
    }
    Ok(Tensor::cat(&[up, skip], 1)?)
}
