//! Images and the small convolutional backbone that turns them into a
//! three-scale feature pyramid.

use std::path::Path;

use efh_numcore::{AnyTensor, Scalar, Tensor, Var, TNSR_MAGIC};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, LayerNorm};
use crate::params::Session;

/// Spatial sizes must be multiples of this so P5 is integral.
pub const IMAGE_ALIGN: usize = 32;

/// An `[H, W, 3]` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let &[h, w, c] = tensor.shape() else {
            return Err(Error::arg(format!("image must be [H, W, 3], got {:?}", tensor.shape())));
        };
        if c != 3 {
            return Err(Error::arg(format!("image must have 3 channels, got {c}")));
        }
        if h % IMAGE_ALIGN != 0 || w % IMAGE_ALIGN != 0 {
            return Err(Error::arg(format!("image size {h}x{w} is not divisible by {IMAGE_ALIGN}")));
        }
        if tensor.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::arg("image values must lie in [0, 1]"));
        }
        Ok(Self { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            tensor: self.tensor.cast(),
        }
    }

    /// Decodes an 8-bit binary PPM (`P6`).
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (w, h, maxval, body) = parse_ppm_header(bytes).map_err(Error::arg)?;
        let need = w * h * 3;
        if body.len() < need {
            return Err(Error::arg(format!("PPM payload has {} bytes, expected {need}", body.len())));
        }
        let scale = 1.0 / maxval as f64;
        let t = Tensor::from_fn(&[h, w, 3], |i| T::c(body[i] as f64 * scale));
        Self::new(t)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        out.extend(self.tensor.data().iter().map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    /// Loads a PPM or TNSR file, chosen by its magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let parsed = if bytes.starts_with(TNSR_MAGIC) {
            AnyTensor::read_tnsr(&mut bytes.as_slice())
                .map_err(Error::from)
                .and_then(|t| match t {
                    AnyTensor::F32(t) => Self::new(t.cast()),
                    AnyTensor::F64(t) => Self::new(t.cast()),
                })
        } else {
            Self::from_ppm(&bytes)
        };
        parsed.map_err(|e| Error::format(path, e.to_string()))
    }
}

fn parse_ppm_header(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, &[u8]), String> {
    if !bytes.starts_with(b"P6") {
        return Err("not a binary PPM (P6)".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PPM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("bad PPM header field")?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PPM geometry {w}x{h} maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after PPM header".into());
    }
    Ok((w, h, maxval, &bytes[pos + 1..]))
}

/// Graph handles of the three pyramid levels, each `[h, w, d]`.
#[derive(Debug, Clone, Copy)]
pub struct PyramidVars {
    pub p3: Var,
    pub p4: Var,
    pub p5: Var,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    conv: Conv2d,
    norm: LayerNorm,
    down: Conv2d,
}

/// Stride-4 stem followed by three stages, each ending in a stride-2
/// downsample, yielding strides 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Conv2d,
    stages: [Stage; 3],
}

impl Backbone {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let stem = Conv2d::new(b, "stem", 3, d, 4, 4, 0);
        let stages = [0, 1, 2].map(|i| {
            let mut s = b.sub(&format!("stage{i}"));
            Stage {
                conv: Conv2d::new(&mut s, "conv", d, d, 3, 1, 1),
                norm: LayerNorm::new(&mut s, "norm", d),
                down: Conv2d::new(&mut s, "down", d, d, 2, 2, 0),
            }
        });
        Self { stem, stages }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, image: &Image<T>) -> Result<PyramidVars> {
        let x = s.constant(image.tensor().clone());
        self.forward_var(s, x)
    }

    /// Same as [`Self::forward`] on an image already in the graph.
    pub fn forward_var<T: Scalar>(&self, s: &mut Session<T>, image: Var) -> Result<PyramidVars> {
        let mut x = self.stem.forward(s, image)?;
        let mut outs = [x; 3];
        for (i, st) in self.stages.iter().enumerate() {
            x = st.conv.forward(s, x)?;
            x = st.norm.forward(s, x)?;
            x = s.g.silu(x)?;
            x = st.down.forward(s, x)?;
            outs[i] = x;
        }
        Ok(PyramidVars {
            p3: outs[0],
            p4: outs[1],
            p5: outs[2],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use efh_numcore::seeded_rng;

    fn backbone() -> (ParamStore<f32>, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let bb = Backbone::new(&mut Builder::new(&mut store, &mut rng), &ModelConfig::micro());
        (store, bb)
    }

    #[test]
    fn pyramid_strides() {
        let (store, bb) = backbone();
        let img = Image::new(Tensor::full(&[64, 64, 3], 0.5)).unwrap();
        let mut s = Session::inference(&store);
        let p = bb.forward(&mut s, &img).unwrap();
        assert_eq!(s.g.shape(p.p3), &[8, 8, 8]);
        assert_eq!(s.g.shape(p.p4), &[4, 4, 8]);
        assert_eq!(s.g.shape(p.p5), &[2, 2, 8]);
        let again = {
            let mut s2 = Session::inference(&store);
            let p2 = bb.forward(&mut s2, &img).unwrap();
            s2.value(p2.p5).clone()
        };
        assert_eq!(s.value(p.p5), &again);
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let (store, bb) = backbone();
        let img = Image::new(Tensor::zeros(&[32, 64, 3])).unwrap();
        let mut s = Session::inference(&store);
        let p = bb.forward(&mut s, &img).unwrap();
        for v in [p.p3, p.p4, p.p5] {
            assert!(s.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rejects_bad_images() {
        assert!(Image::<f32>::new(Tensor::zeros(&[48, 64, 3])).is_err());
        assert!(Image::<f32>::new(Tensor::zeros(&[32, 32, 4])).is_err());
        assert!(Image::<f32>::new(Tensor::full(&[32, 32, 3], 1.5)).is_err());
        assert!(Image::<f32>::from_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let t = Tensor::from_fn(&[32, 32, 3], |i| (i % 256) as f32 / 255.0);
        let img = Image::new(t).unwrap();
        let bytes = img.to_ppm();
        let back = Image::<f32>::from_ppm(&bytes).unwrap();
        assert_eq!(back.to_ppm(), bytes);
        let commented = [b"P6\n# hi\n32 32\n255\n".as_slice(), &bytes[13..]].concat();
        assert_eq!(Image::<f32>::from_ppm(&commented).unwrap(), back);
    }
}
