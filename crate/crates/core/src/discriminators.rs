//! Image and story discriminators and the adversarial / character losses.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sigmoid, Builder, Conv2d, Linear};

const SLOPE: f64 = 0.2;
/// Lower clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-8;

/// Stride-2 conv tower down to a 4×4 map.
struct Tower {
    convs: Vec<Conv2d>,
    out_channels: usize,
}

impl Tower {
    fn new(b: &mut Builder, image_size: usize, base: usize) -> Result<Self> {
        let n = (image_size / 4).trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(n);
        let mut c_in = 3;
        let mut c_out = base;
        for i in 0..n {
            convs.push(Conv2d::new(
                &mut b.sub(&format!("down{i}")),
                c_in,
                c_out,
                4,
                2,
                1,
            )?);
            c_in = c_out;
            c_out = (2 * c_out).min(8 * base);
        }
        Ok(Self {
            convs,
            out_channels: c_in,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for c in &self.convs {
            x = leaky_relu(&c.forward(&x)?, SLOPE)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// (N,) probability of "real".
    pub prob: Tensor,
    /// (N, C) character logits from the unconditioned features.
    pub char_logits: Tensor,
}

pub struct ImageDiscriminator {
    tower: Tower,
    cond: Linear,
    joint: Conv2d,
    head: Linear,
    chars: Linear,
    cond_dim: usize,
}

impl ImageDiscriminator {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let tower = Tower::new(&mut b.sub("tower"), cfg.image_size, cfg.disc_channels)?;
        let c = tower.out_channels;
        let k = cfg.disc_channels;
        Ok(Self {
            cond: Linear::new(&mut b.sub("cond"), cfg.sent_dim + cfg.cond_dim, k)?,
            joint: Conv2d::new(&mut b.sub("joint"), c + k, c, 1, 1, 0)?,
            head: Linear::new(&mut b.sub("head"), c * 16, 1)?,
            chars: Linear::new(&mut b.sub("chars"), c * 16, cfg.num_chars)?,
            cond_dim: cfg.sent_dim + cfg.cond_dim,
            tower,
        })
    }

    /// `x` (N, 3, H, W), `s` (N, d_s), `h0` (N, d_h).
    pub fn forward(&self, x: &Tensor, s: &Tensor, h0: &Tensor) -> Result<DiscOutput> {
        let feats = self.tower.forward(x)?;
        let (n, c, gh, gw) = feats.dims4()?;
        let cond_in = Tensor::cat(&[s, h0], 1)?;
        if cond_in.dim(1)? != self.cond_dim || cond_in.dim(0)? != n {
            return Err(Error::shape(format!(
                "image discriminator conditioning {:?} for {n} images",
                cond_in.dims()
            )));
        }
        let cond = leaky_relu(&self.cond.forward(&cond_in)?, SLOPE)?;
        let k = cond.dim(1)?;
        let cond = cond
            .reshape((n, k, 1, 1))?
            .broadcast_as((n, k, gh, gw))?
            .contiguous()?;
        let j = leaky_relu(
            &self.joint.forward(&Tensor::cat(&[&feats, &cond], 1)?)?,
            SLOPE,
        )?;
        let prob = sigmoid(&self.head.forward(&j.reshape((n, c * gh * gw))?)?)?.squeeze(1)?;
        let char_logits = self.chars.forward(&feats.reshape((n, c * gh * gw))?)?;
        Ok(DiscOutput { prob, char_logits })
    }
}

pub struct StoryDiscriminator {
    tower: Tower,
    frame_fc: Linear,
    text_fc: Linear,
    head: Linear,
    story_len: usize,
    embed: usize,
}

impl StoryDiscriminator {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let tower = Tower::new(&mut b.sub("tower"), cfg.image_size, cfg.disc_channels)?;
        let c = tower.out_channels;
        let e = cfg.disc_channels;
        let t = cfg.story_len;
        Ok(Self {
            frame_fc: Linear::new(&mut b.sub("frame_fc"), c * 16, e)?,
            text_fc: Linear::new(&mut b.sub("text_fc"), t * cfg.sent_dim, t * e)?,
            head: Linear::new(&mut b.sub("head"), t * e, 1)?,
            story_len: t,
            embed: e,
            tower,
        })
    }

    /// `x` (B, T, 3, H, W), `story` (B, T, d_s). Returns (B,) probabilities.
    pub fn forward(&self, x: &Tensor, story: &Tensor) -> Result<Tensor> {
        let (b, t, ch, h, w) = x.dims5()?;
        if t != self.story_len || story.dim(1)? != self.story_len {
            return Err(Error::shape(format!(
                "story discriminator expects {} frames, got {t}",
                self.story_len
            )));
        }
        let f = self.tower.forward(&x.reshape((b * t, ch, h, w))?)?;
        let f = self.frame_fc.forward(&f.reshape((b * t, ()))?)?;
        let f = f.reshape((b, t * self.embed))?;
        let s = self.text_fc.forward(&story.reshape((b, ()))?)?;
        Ok(sigmoid(&self.head.forward(&(f * s)?)?)?.squeeze(1)?)
    }
}

fn neg_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0)?.log()?.neg()?.mean_all()?)
}

fn neg_log_one_minus(p: &Tensor) -> Result<Tensor> {
    neg_log(&p.affine(-1.0, 1.0)?)
}

/// −½ E[log D_img(x̂)] − ½ E[log D_story(X̂)].
pub fn generator_adv_loss(img_fake: &Tensor, story_fake: &Tensor) -> Result<Tensor> {
    Ok(((neg_log(img_fake)? + neg_log(story_fake)?)? * 0.5)?)
}

/// −½ E[log D(real)] − ½ E[log(1 − D(fake))].
pub fn discriminator_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    Ok(((neg_log(real)? + neg_log_one_minus(fake)?)? * 0.5)?)
}

/// Mean binary cross-entropy over every (image, character) logit.
pub fn char_bce(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let labels = labels.to_dtype(logits.dtype())?;
    let relu = logits.relu()?;
    let soft = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(((relu - (logits * labels)?)? + soft)?.mean_all()?)
}

pub struct DiscLosses {
    pub d_img: Tensor,
    pub d_story: Tensor,
    pub char: Tensor,
}

pub fn discriminator_losses(
    img_real: &Tensor,
    img_fake: &Tensor,
    story_real: &Tensor,
    story_fake: &Tensor,
    char_logits: &Tensor,
    char_labels: &Tensor,
) -> Result<DiscLosses> {
    Ok(DiscLosses {
        d_img: discriminator_loss(img_real, img_fake)?,
        d_story: discriminator_loss(story_real, story_fake)?,
        char: char_bce(char_logits, char_labels)?,
    })
}

/// Sigmoid of character logits thresholded at 0.5.
pub fn char_predictions(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let p = sigmoid(logits)?;
    let rows = p.dim(0)?;
    let v = crate::nn::to_f64_vec(&p)?;
    let c = p.dim(D::Minus1)?;
    Ok((0..rows)
        .map(|r| {
            v[r * c..(r + 1) * c]
                .iter()
                .map(|&x| u8::from(x >= 0.5))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, scalar, to_f64_vec, ParamStore};
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
    }

    #[test]
    fn hand_values() {
        let g = scalar(&generator_adv_loss(&t(&[0.5]), &t(&[0.5])).unwrap()).unwrap();
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
        let g = scalar(&generator_adv_loss(&t(&[0.9]), &t(&[0.25])).unwrap()).unwrap();
        assert!((g - 0.5 * (-(0.9f64).ln() - (0.25f64).ln())).abs() < 1e-12);
        assert!((g - 0.7458).abs() < 1e-4);
        let d = scalar(&discriminator_loss(&t(&[0.9]), &t(&[0.1])).unwrap()).unwrap();
        assert!((d - 0.1054).abs() < 1e-4);
        let near_one = scalar(&generator_adv_loss(&t(&[1.0]), &t(&[1.0])).unwrap()).unwrap();
        assert_eq!(near_one, 0.0);
    }

    #[test]
    fn clamped_losses_stay_finite() {
        for p in [0.0, 1.0] {
            let v = scalar(&discriminator_loss(&t(&[p]), &t(&[p])).unwrap()).unwrap();
            assert!(v.is_finite());
            let v = scalar(&generator_adv_loss(&t(&[p]), &t(&[p])).unwrap()).unwrap();
            assert!(v.is_finite());
        }
    }

    #[test]
    fn bce_limits() {
        let labels = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0], [1.0, 1.0]], &Device::Cpu).unwrap();
        let perfect = labels.affine(20.0, -10.0).unwrap();
        assert!(scalar(&char_bce(&perfect, &labels).unwrap()).unwrap() < 1e-3);
        let flat = labels.zeros_like().unwrap();
        let v = scalar(&char_bce(&flat, &labels).unwrap()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn discriminator_contracts() {
        let cfg = ModelConfig::tiny(12);
        let mut store = ParamStore::new(DType::F64, 2);
        let di = ImageDiscriminator::new(&mut store.root().sub("img"), &cfg).unwrap();
        let ds = StoryDiscriminator::new(&mut store.root().sub("story"), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = cfg.image_size;
        let x = randn(&mut rng, &[2, 3, s, s], DType::F64).unwrap();
        let sent = randn(&mut rng, &[2, cfg.sent_dim], DType::F64).unwrap();
        let sent2 = randn(&mut rng, &[2, cfg.sent_dim], DType::F64).unwrap();
        let h0 = randn(&mut rng, &[2, cfg.cond_dim], DType::F64).unwrap();
        let a = di.forward(&x, &sent, &h0).unwrap();
        let b = di.forward(&x, &sent2, &h0).unwrap();
        assert_eq!(a.char_logits.dims(), &[2, 9]);
        let pa = to_f64_vec(&a.prob).unwrap();
        assert!(pa.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_ne!(pa, to_f64_vec(&b.prob).unwrap());

        let tt = cfg.story_len;
        let xs = randn(&mut rng, &[2, tt, 3, s, s], DType::F64).unwrap();
        let story = randn(&mut rng, &[2, tt, cfg.sent_dim], DType::F64).unwrap();
        let p = to_f64_vec(&ds.forward(&xs, &story).unwrap()).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let order = Tensor::new(&[1u32, 0, 2], &Device::Cpu).unwrap();
        let swapped = xs.index_select(&order, 1).unwrap();
        assert_ne!(
            p,
            to_f64_vec(&ds.forward(&swapped, &story).unwrap()).unwrap()
        );
        let short = xs.narrow(1, 0, tt - 1).unwrap();
        assert!(matches!(ds.forward(&short, &story), Err(Error::Shape(_))));
    }
}
