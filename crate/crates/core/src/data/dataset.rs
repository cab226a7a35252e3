use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

/// Per-pixel channel map `x -> mix * x + bias`, followed by Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityTransform {
    /// `C x C`, row-major.
    pub mix: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
}

impl ModalityTransform {
    pub fn identity(channels: usize, noise_sigma: f64) -> Self {
        let mut mix = vec![0.0; channels * channels];
        for c in 0..channels {
            mix[c * channels + c] = 1.0;
        }
        Self {
            mix,
            bias: vec![0.0; channels],
            noise_sigma,
        }
    }

    /// Thermal-style map: a single luminance-like intensity (weights falling
    /// off with channel index) replicated to every output channel, plus a
    /// constant shift. Colour differences between identities are lost.
    pub fn thermal(channels: usize, noise_sigma: f64) -> Self {
        let weights: Vec<f64> = (0..channels).map(|c| 1.0 / (1.0 + c as f64)).collect();
        let norm: f64 = weights.iter().sum();
        let mix = (0..channels).flat_map(|_| weights.iter().map(|w| w / norm)).collect();
        Self {
            mix,
            bias: vec![0.4; channels],
            noise_sigma,
        }
    }
}

/// Everything needed to regenerate a synthetic two-modality identity set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    pub num_identities: usize,
    /// Images per identity and per modality.
    pub images_per_identity: usize,
    pub image_shape: [usize; 3],
    pub latent_dim: usize,
    /// Per-image Gaussian perturbation of the identity latent (pose/viewpoint stand-in).
    pub latent_jitter: f64,
    pub rgb: ModalityTransform,
    pub ir: ModalityTransform,
    pub seed: u64,
}

impl SynthDatasetSpec {
    pub fn new(num_identities: usize, images_per_identity: usize, image_shape: [usize; 3], seed: u64) -> Self {
        let c = image_shape[0];
        Self {
            num_identities,
            images_per_identity,
            image_shape,
            latent_dim: 8,
            latent_jitter: 0.3,
            rgb: ModalityTransform::identity(c, 0.1),
            ir: ModalityTransform::thermal(c, 0.1),
            seed,
        }
    }

    pub fn transform(&self, m: Modality) -> &ModalityTransform {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Ir => &self.ir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_identities < 2 {
            return bad(format!("need at least 2 identities, got {}", self.num_identities));
        }
        if self.images_per_identity == 0 {
            return bad("images_per_identity must be positive".into());
        }
        if self.image_shape.contains(&0) {
            return bad(format!("image_shape {:?} has a zero extent", self.image_shape));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        let c = self.image_shape[0];
        for m in Modality::ALL {
            let t = self.transform(m);
            if t.mix.len() != c * c || t.bias.len() != c {
                return bad(format!("{m} transform does not match {c} channels"));
            }
            if !(t.noise_sigma >= 0.0) || !self.latent_jitter.is_finite() || self.latent_jitter < 0.0 {
                return bad(format!("{m} noise and latent jitter must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_shape.iter().product()
    }
}

/// One generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub modality: Modality,
    pub pixels: Vec<f32>,
}

/// Immutable collection of samples with an `(identity, modality)` index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: SynthDatasetSpec,
    samples: Vec<Sample>,
    index: BTreeMap<(u32, Modality), Vec<usize>>,
}

/// Fixed spatial bases and identity latents drawn from the dataset seed.
struct Renderer {
    bases: Vec<Vec<f64>>,
    latents: Vec<Vec<f64>>,
}

impl Renderer {
    fn new(spec: &SynthDatasetSpec, rng: &mut ChaCha8Rng) -> Self {
        let [c, h, w] = spec.image_shape;
        // full-width horizontal stripes about four rows tall, like clothing bands
        let (ch, cw) = (h.div_ceil(4).max(1), 1);
        let bases = (0..spec.latent_dim)
            .map(|_| {
                let coarse: Vec<f64> = (0..c * ch * cw).map(|_| StandardNormal.sample(rng)).collect();
                let mut full = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let (cy, cx) = (y * ch / h, x * cw / w);
                            full[(ci * h + y) * w + x] = coarse[(ci * ch + cy) * cw + cx];
                        }
                    }
                }
                full
            })
            .collect();
        let latents = (0..spec.num_identities)
            .map(|_| (0..spec.latent_dim).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        Self { bases, latents }
    }

    fn render(&self, spec: &SynthDatasetSpec, latent: &[f64], m: Modality) -> Vec<f64> {
        let [c, h, w] = spec.image_shape;
        let plane = h * w;
        let scale = 1.0 / (spec.latent_dim as f64).sqrt();
        let mut base = vec![0.0; c * plane];
        for (z, b) in latent.iter().zip(&self.bases) {
            for (o, v) in base.iter_mut().zip(b) {
                *o += scale * z * v;
            }
        }
        let t = spec.transform(m);
        let mut out = vec![0.0; c * plane];
        for o in 0..c {
            for p in 0..plane {
                let mut acc = t.bias[o];
                for i in 0..c {
                    acc += t.mix[o * c + i] * base[i * plane + p];
                }
                out[o * plane + p] = acc;
            }
        }
        out
    }
}

impl Dataset {
    /// Render every `(identity, modality, image)` triple. The same identity
    /// latent feeds both modalities; each image adds latent jitter and pixel noise.
    pub fn generate(spec: &SynthDatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let renderer = Renderer::new(spec, &mut rng);
        let mut samples = Vec::with_capacity(2 * spec.num_identities * spec.images_per_identity);
        for (id, latent) in renderer.latents.iter().enumerate() {
            for m in Modality::ALL {
                let sigma = spec.transform(m).noise_sigma;
                for _ in 0..spec.images_per_identity {
                    let jittered: Vec<f64> = latent
                        .iter()
                        .map(|z| z + spec.latent_jitter * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                        .collect();
                    let clean = renderer.render(spec, &jittered, m);
                    let pixels = clean
                        .into_iter()
                        .map(|v| {
                            let n: f64 = StandardNormal.sample(&mut rng);
                            (v + sigma * n) as f32
                        })
                        .collect();
                    samples.push(Sample {
                        id: id as u32,
                        modality: m,
                        pixels,
                    });
                }
            }
        }
        Self::from_samples(spec.clone(), samples)
    }

    pub fn from_samples(spec: SynthDatasetSpec, samples: Vec<Sample>) -> Result<Self> {
        let n = spec.pixels_per_image();
        let mut index: BTreeMap<(u32, Modality), Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.pixels.len() != n {
                return Err(Error::Format(format!(
                    "sample {i} has {} pixels, expected {n}",
                    s.pixels.len()
                )));
            }
            index.entry((s.id, s.modality)).or_default().push(i);
        }
        Ok(Self {
            spec,
            samples,
            index,
        })
    }

    /// Noise-free, jitter-free render of an identity.
    pub fn prototype(&self, id: u32, modality: Modality) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let r = Renderer::new(&self.spec, &mut rng);
        r.render(&self.spec, &r.latents[id as usize], modality)
    }

    pub fn spec(&self) -> &SynthDatasetSpec {
        &self.spec
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted distinct identities.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.index.keys().map(|(id, _)| *id).collect();
        ids.dedup();
        ids
    }

    /// Sample indices of one identity in one modality.
    pub fn indices(&self, id: u32, modality: Modality) -> &[usize] {
        self.index.get(&(id, modality)).map_or(&[], |v| v.as_slice())
    }

    /// `[len, C, H, W]` tensor of the given samples.
    pub fn stack(&self, indices: &[usize]) -> Tensor {
        let [c, h, w] = self.spec.image_shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend(self.samples[i].pixels.iter().map(|&p| f64::from(p)));
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent sample sizes")
    }

    /// Split each `(identity, modality)` list: the first `train_per_identity`
    /// images go to the first dataset, the rest to the second.
    pub fn split(&self, train_per_identity: usize) -> Result<(Dataset, Dataset)> {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for idx in self.index.values() {
            if idx.len() <= train_per_identity {
                return Err(Error::Config(format!(
                    "cannot keep {train_per_identity} training images out of {}",
                    idx.len()
                )));
            }
            for (k, &i) in idx.iter().enumerate() {
                let s = self.samples[i].clone();
                if k < train_per_identity {
                    a.push(s);
                } else {
                    b.push(s);
                }
            }
        }
        let mut spec_a = self.spec.clone();
        spec_a.images_per_identity = train_per_identity;
        let mut spec_b = self.spec.clone();
        spec_b.images_per_identity -= train_per_identity;
        Ok((Dataset::from_samples(spec_a, a)?, Dataset::from_samples(spec_b, b)?))
    }

    /// Binary container: magic `XMDS`, `u32` version, `u32` length plus JSON
    /// spec, `u64` sample count, then per sample `u32` id, `u8` modality
    /// (0 RGB, 1 IR) and `f32` pixels, all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let spec = serde_json::to_vec(&self.spec)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(spec.len() as u32).to_le_bytes())?;
        w.write_all(&spec)?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&s.id.to_le_bytes())?;
            w.write_all(&[s.modality.tag()])?;
            for p in &s.pixels {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format(format!("bad dataset magic {:?}", magic)));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        r.read_exact(&mut b4)?;
        let mut spec = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut spec)?;
        let spec: SynthDatasetSpec = serde_json::from_slice(&spec)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let n = spec.pixels_per_image();
        let mut samples = Vec::with_capacity(count);
        let mut buf = vec![0u8; n * 4];
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let id = u32::from_le_bytes(b4);
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            r.read_exact(&mut buf)?;
            let pixels = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            samples.push(Sample {
                id,
                modality: Modality::from_tag(tag[0])?,
                pixels,
            });
        }
        Self::from_samples(spec, samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"XMDS";
pub const DATASET_VERSION: u32 = 1;

/// Uniform integer helper shared by samplers.
pub(crate) fn pick<R: Rng + ?Sized>(rng: &mut R, len: usize, amount: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, amount).into_vec()
}
