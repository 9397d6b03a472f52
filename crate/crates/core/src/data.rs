//! Synthetic few-identity / many-attribute data: the fixed generator world, the identity encoder,
//! the attribute readout, datasets, and the toy evaluation metrics.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::IdEncoder;
use crate::io::Archive;
use crate::model::ToyDiTConfig;
use crate::numerics::{cosine, Scalar, Tensor};

/// Seed of the generator world. Independent of any dataset seed.
pub const WORLD_SEED: u64 = 0x5EED_1D_F10;

/// Shape and calibration of the generator world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub token_count: usize,
    pub dim: usize,
    pub cond_token_count: usize,
    pub cond_dim: usize,
    pub id_token_count: usize,
    pub id_dim: usize,
    pub k_id: usize,
    /// Width of the identity pathway; also the embedding size `d_e`.
    pub h_id: usize,
    pub k_attr: usize,
    pub h_attr: usize,
    /// Rank of the token pattern each pathway writes.
    pub token_rank: usize,
    /// Per-element standard deviation contributed by the identity pathway.
    pub id_std: f64,
    pub attr_std: f64,
    /// Share of the attribute pathway that lies in the identity pathway's column space.
    pub overlap: f64,
    pub id_gain: f64,
    pub attr_gain: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::for_model(&ToyDiTConfig::default())
    }
}

impl WorldConfig {
    pub fn for_model(model: &ToyDiTConfig) -> Self {
        Self {
            token_count: model.token_count,
            dim: model.dim,
            cond_token_count: model.cond_token_count,
            cond_dim: model.cond_dim,
            id_token_count: model.id_token_count,
            id_dim: model.id_dim,
            k_id: 6,
            h_id: 8,
            k_attr: 3,
            h_attr: 6,
            token_rank: 2,
            id_std: 1.0,
            attr_std: 0.6,
            overlap: 0.6,
            id_gain: 1.0,
            attr_gain: 0.4,
            seed: WORLD_SEED,
        }
    }

    pub fn numel(&self) -> usize {
        self.token_count * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.token_count,
            self.dim,
            self.cond_token_count,
            self.cond_dim,
            self.id_token_count,
            self.id_dim,
            self.k_id,
            self.h_id,
            self.k_attr,
            self.h_attr,
            self.token_rank,
        ];
        if extents.contains(&0) {
            return Err(Error::Config("all world extents must be positive".into()));
        }
        if self.h_id + self.h_attr > self.numel() || self.token_rank * self.dim < self.h_id.max(self.h_attr) {
            return Err(Error::Config("sample too small for the requested pathway widths".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap = {} must lie in [0, 1)", self.overlap)));
        }
        for (name, v) in [
            ("id_std", self.id_std),
            ("attr_std", self.attr_std),
            ("id_gain", self.id_gain),
            ("attr_gain", self.attr_gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    /// Checks that a model configuration matches this world's tensor shapes.
    pub fn check_model(&self, model: &ToyDiTConfig) -> Result<()> {
        let ours = [self.token_count, self.dim, self.cond_token_count, self.cond_dim, self.id_token_count, self.id_dim];
        let theirs = [
            model.token_count,
            model.dim,
            model.cond_token_count,
            model.cond_dim,
            model.id_token_count,
            model.id_dim,
        ];
        if ours == theirs {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "model shapes {theirs:?} do not match dataset shapes {ours:?} (tokens, dim, cond tokens, cond dim, id tokens, id dim)"
            )))
        }
    }
}

/// The fixed generator `G(z_id, z_attr)` and everything derived from it.
#[derive(Debug, Clone)]
pub struct World<T> {
    config: WorldConfig,
    a_id: Tensor<T>,
    u_id: Tensor<T>,
    a_attr: Tensor<T>,
    u_attr: Tensor<T>,
    encoder: Tensor<T>,
    readout: Tensor<T>,
    cond_map: Tensor<T>,
    cond_bias: Tensor<T>,
    id_feature: Tensor<T>,
}

fn randn_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| -> f64 { StandardNormal.sample(rng) }).collect()
}

/// Orthonormal `numel × width` basis whose columns are sums of `rank` token-pattern ⊗ channel products.
fn token_structured_basis(rng: &mut ChaCha8Rng, tokens: usize, dim: usize, rank: usize, width: usize) -> DMatrix<f64> {
    let patterns = randn_mat(rng, tokens, rank, 1.0);
    let channels: Vec<DMatrix<f64>> = (0..rank).map(|_| randn_mat(rng, dim, width, 1.0)).collect();
    let u = DMatrix::from_fn(tokens * dim, width, |row, h| {
        let (i, c) = (row / dim, row % dim);
        (0..rank).map(|r| patterns[(i, r)] * channels[r][(c, h)]).sum()
    });
    u.qr().q()
}

fn to_tensor<T: Scalar>(m: &DMatrix<f64>) -> Tensor<T> {
    Tensor::from_fn(&[m.nrows(), m.ncols()], |idx| T::of(m[(idx / m.ncols(), idx % m.ncols())]))
}

fn tanh_layer(a: &DMatrix<f64>, z: &[f64], gain: f64) -> Vec<f64> {
    (0..a.nrows())
        .map(|r| (gain * (0..a.ncols()).map(|c| a[(r, c)] * z[c]).sum::<f64>()).tanh())
        .collect()
}

const CALIBRATION_DRAWS: usize = 4096;

impl<T: Scalar> World<T> {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let a_id = randn_mat(&mut rng, c.h_id, c.k_id, 1.0 / (c.k_id as f64).sqrt());
        let a_attr = randn_mat(&mut rng, c.h_attr, c.k_attr, 1.0 / (c.k_attr as f64).sqrt());
        let q_id = token_structured_basis(&mut rng, c.token_count, c.dim, c.token_rank, c.h_id);
        let q_other = token_structured_basis(&mut rng, c.token_count, c.dim, c.token_rank, c.h_attr);
        // Attribute directions: part inside span(q_id), the rest outside it.
        let mix = randn_mat(&mut rng, c.h_id.max(c.h_attr), c.h_attr, 1.0).qr().q().rows(0, c.h_id).into_owned();
        let inside = &q_id * &mix;
        let outside = &q_other - &q_id * (q_id.transpose() * &q_other);
        let outside = outside.qr().q();
        let dir_attr = inside * c.overlap + outside * (1.0 - c.overlap * c.overlap).sqrt();

        // Calibrate the pathway scales so the per-element standard deviations hit their targets.
        let (mut e_id, mut e_attr) = (0.0, 0.0);
        let mut draws_attr = Vec::with_capacity(CALIBRATION_DRAWS);
        for _ in 0..CALIBRATION_DRAWS {
            let zi = randn_vec(&mut rng, c.k_id);
            let za = randn_vec(&mut rng, c.k_attr);
            let hi = tanh_layer(&a_id, &zi, c.id_gain);
            let ha = tanh_layer(&a_attr, &za, c.attr_gain);
            e_id += hi.iter().map(|v| v * v).sum::<f64>();
            let pa = &dir_attr * DMatrix::from_column_slice(c.h_attr, 1, &ha);
            e_attr += pa.norm_squared();
            draws_attr.push((za, ha));
        }
        let n = c.numel() as f64;
        let scale_id = c.id_std * (n * CALIBRATION_DRAWS as f64 / e_id).sqrt();
        let scale_attr = c.attr_std * (n * CALIBRATION_DRAWS as f64 / e_attr).sqrt();
        let u_id = q_id * scale_id;
        let u_attr = dir_attr * scale_attr;

        // Least-squares inverse of the identity pathway.
        let encoder = u_id
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Config(format!("identity pathway inversion failed: {e}")))?;

        // Attribute readout: recover the attribute hidden state with the joint pseudo-inverse, then
        // regress z_attr on it by least squares.
        let joint = DMatrix::from_fn(c.numel(), c.h_id + c.h_attr, |r, k| {
            if k < c.h_id {
                u_id[(r, k)]
            } else {
                u_attr[(r, k - c.h_id)]
            }
        });
        let joint_inv = joint
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Config(format!("pathway inversion failed: {e}")))?;
        let attr_rows = joint_inv.rows(c.h_id, c.h_attr).into_owned();
        let design = DMatrix::from_fn(CALIBRATION_DRAWS, c.h_attr + 1, |i, k| {
            if k < c.h_attr {
                draws_attr[i].1[k]
            } else {
                1.0
            }
        });
        let targets = DMatrix::from_fn(CALIBRATION_DRAWS, c.k_attr, |i, k| draws_attr[i].0[k]);
        let coef = design
            .svd(true, true)
            .solve(&targets, 1e-12)
            .map_err(|e| Error::Config(format!("readout fit failed: {e}")))?;
        let slope = coef.rows(0, c.h_attr).transpose();
        let readout = slope * attr_rows;

        let m = c.cond_token_count * c.cond_dim;
        let cond_map = randn_mat(&mut rng, m, c.k_attr, 1.0 / (c.k_attr as f64).sqrt());
        let cond_bias = randn_mat(&mut rng, m, 1, 0.1);
        let id_feature = randn_mat(&mut rng, c.id_token_count * c.id_dim, c.h_id, 1.0);

        Ok(Self {
            a_id: to_tensor(&a_id),
            u_id: to_tensor(&u_id),
            a_attr: to_tensor(&a_attr),
            u_attr: to_tensor(&u_attr),
            encoder: to_tensor(&encoder),
            readout: to_tensor(&readout),
            cond_map: to_tensor(&cond_map),
            cond_bias: to_tensor(&cond_bias),
            id_feature: to_tensor(&id_feature),
            config,
        })
    }

    /// The standard world for a model configuration.
    pub fn for_model(model: &ToyDiTConfig) -> Result<Self> {
        Self::new(WorldConfig::for_model(model))
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.h_id
    }

    fn column(v: &Tensor<T>) -> Tensor<T> {
        v.reshape(&[v.numel(), 1]).expect("numel preserved")
    }

    fn pathway(a: &Tensor<T>, u: &Tensor<T>, z: &Tensor<T>, gain: f64) -> Result<Tensor<T>> {
        let g = T::of(gain);
        let h = a.matmul(&Self::column(z))?.map(|v| (g * v).tanh());
        u.matmul(&h)
    }

    /// `x0 = G(z_id, z_attr)`, shaped `n_gen × d_gen`.
    pub fn generate(&self, z_id: &Tensor<T>, z_attr: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        if z_id.numel() != c.k_id || z_attr.numel() != c.k_attr {
            return Err(Error::dim("generate", z_id.shape(), z_attr.shape()));
        }
        let mut x = Self::pathway(&self.a_id, &self.u_id, z_id, c.id_gain)?;
        x.add_assign(&Self::pathway(&self.a_attr, &self.u_attr, z_attr, c.attr_gain)?)?;
        x.reshape(&[c.token_count, c.dim])
    }

    fn check_sample(&self, x: &Tensor<T>, op: &'static str) -> Result<()> {
        if x.numel() != self.config.numel() {
            return Err(Error::dim(op, x.shape(), &[self.config.token_count, self.config.dim]));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(op.into()));
        }
        Ok(())
    }

    /// Unit-norm identity embedding.
    pub fn id_encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let e = self.embed(x)?;
        let n = e.norm();
        if n == T::zero() {
            return Err(Error::Degenerate("id_encode"));
        }
        Ok(e.scale(T::one() / n))
    }

    /// Linear estimate of the attribute latent.
    pub fn attr_readout(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_sample(x, "attr_readout")?;
        Ok(Tensor::vector(self.readout.matmul(&Self::column(x))?.into_data()))
    }

    /// The "prompt": an affine encoding of the attribute latent, shaped `m × d_c`.
    pub fn condition(&self, z_attr: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let mut v = self.cond_map.matmul(&Self::column(z_attr))?;
        v.add_assign(&self.cond_bias)?;
        v.reshape(&[c.cond_token_count, c.cond_dim])
    }

    /// ID tokens handed to the model: a fixed linear feature of the reference embedding.
    pub fn id_tokens(&self, e_ref: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        self.id_feature
            .matmul(&Self::column(e_ref))?
            .reshape(&[c.id_token_count, c.id_dim])
    }

    pub fn identity(&self, id_code: usize, z_id: Tensor<T>) -> Result<IdentityRecord<T>> {
        let canonical = self.generate(&z_id, &Tensor::zeros(&[self.config.k_attr]))?;
        let e_ref = self.id_encode(&canonical)?;
        let id_tokens = self.id_tokens(&e_ref)?;
        Ok(IdentityRecord {
            id_code,
            z_id,
            e_ref,
            id_tokens,
        })
    }
}

impl<T: Scalar> IdEncoder<T> for World<T> {
    /// Unnormalised identity projection; its direction is [`World::id_encode`].
    fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_sample(x, "id_encode")?;
        Ok(Tensor::vector(self.encoder.matmul(&Self::column(x))?.into_data()))
    }

    fn embed_vjp(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.encoder.matmul_tn(&Self::column(upstream))?;
        g.reshape(x.shape())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRecord<T> {
    pub id_code: usize,
    pub z_id: Tensor<T>,
    /// Unit-norm embedding of the canonical (zero-attribute) sample.
    pub e_ref: Tensor<T>,
    pub id_tokens: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub identity: usize,
    pub z_attr: Tensor<T>,
    pub c: Tensor<T>,
    pub x0: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub seed: u64,
    pub per_id: usize,
    pub world: WorldConfig,
    pub identities: Vec<IdentityRecord<T>>,
    pub samples: Vec<Sample<T>>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Validation share per identity: the last `max(1, per_id / 8)` samples.
pub fn validation_count(per_id: usize) -> usize {
    (per_id / 8).max(1)
}

pub fn gen_dataset<T: Scalar>(world: &World<T>, num_ids: usize, per_id: usize, seed: u64) -> Result<Dataset<T>> {
    if num_ids < 2 || per_id < 2 {
        return Err(Error::Config(format!(
            "need at least 2 identities and 2 samples per identity, got {num_ids} x {per_id}"
        )));
    }
    let c = world.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identities = Vec::with_capacity(num_ids);
    for id in 0..num_ids {
        let z_id = Tensor::randn(&[c.k_id], T::one(), &mut rng);
        identities.push(world.identity(id, z_id)?);
    }
    let n_val = validation_count(per_id);
    let mut samples = Vec::with_capacity(num_ids * per_id);
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for rec in &identities {
        for j in 0..per_id {
            let z_attr = Tensor::randn(&[c.k_attr], T::one(), &mut rng);
            let x0 = world.generate(&rec.z_id, &z_attr)?;
            let cond = world.condition(&z_attr)?;
            if j + n_val >= per_id {
                validation.push(samples.len());
            } else {
                train.push(samples.len());
            }
            samples.push(Sample {
                identity: rec.id_code,
                z_attr,
                c: cond,
                x0,
            });
        }
    }
    Ok(Dataset {
        seed,
        per_id,
        world: c.clone(),
        identities,
        samples,
        train,
        validation,
    })
}

fn stack<T: Scalar>(items: impl Iterator<Item = Tensor<T>>, item_shape: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut n = 0;
    for t in items {
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut shape = vec![n];
    shape.extend_from_slice(item_shape);
    Tensor::new(shape, data)
}

fn unstack<T: Scalar>(t: &Tensor<T>, item_shape: &[usize]) -> Vec<Tensor<T>> {
    let size: usize = item_shape.iter().product();
    t.data()
        .chunks(size.max(1))
        .map(|c| Tensor::new(item_shape.to_vec(), c.to_vec()).expect("chunked to shape"))
        .collect()
}

impl<T: Scalar> Dataset<T> {
    pub fn num_ids(&self) -> usize {
        self.identities.len()
    }

    pub fn identity(&self, id: usize) -> Result<&IdentityRecord<T>> {
        self.identities
            .get(id)
            .ok_or_else(|| Error::Usage(format!("identity {id} not in dataset ({} identities)", self.identities.len())))
    }

    pub fn to_archive(&self) -> Archive {
        let c = &self.world;
        let mut a = Archive::new("dataset");
        a.set("seed", &self.seed).unwrap();
        a.set("num_ids", &self.num_ids()).unwrap();
        a.set("per_id", &self.per_id).unwrap();
        a.set("num_samples", &self.samples.len()).unwrap();
        a.set("world", &self.world).unwrap();
        a.set("train", &self.train).unwrap();
        a.set("validation", &self.validation).unwrap();
        a.set("sample_identity", &self.samples.iter().map(|s| s.identity).collect::<Vec<_>>())
            .unwrap();
        let ids = &self.identities;
        a.push("z_id", &stack(ids.iter().map(|r| r.z_id.clone()), &[c.k_id]).unwrap());
        a.push("e_ref", &stack(ids.iter().map(|r| r.e_ref.clone()), &[c.h_id]).unwrap());
        a.push(
            "id_tokens",
            &stack(ids.iter().map(|r| r.id_tokens.clone()), &[c.id_token_count, c.id_dim]).unwrap(),
        );
        let s = &self.samples;
        a.push("z_attr", &stack(s.iter().map(|x| x.z_attr.clone()), &[c.k_attr]).unwrap());
        a.push("c", &stack(s.iter().map(|x| x.c.clone()), &[c.cond_token_count, c.cond_dim]).unwrap());
        a.push("x0", &stack(s.iter().map(|x| x.x0.clone()), &[c.token_count, c.dim]).unwrap());
        a
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        a.expect_kind("dataset", path)?;
        let bad = |e: Error| Error::format(path, e.to_string());
        let world: WorldConfig = a.get("world").map_err(bad)?;
        let sample_identity: Vec<usize> = a.get("sample_identity").map_err(bad)?;
        let c = &world;
        let z_id = unstack(&a.tensor::<T>("z_id").map_err(bad)?, &[c.k_id]);
        let e_ref = unstack(&a.tensor::<T>("e_ref").map_err(bad)?, &[c.h_id]);
        let id_tokens = unstack(&a.tensor::<T>("id_tokens").map_err(bad)?, &[c.id_token_count, c.id_dim]);
        let z_attr = unstack(&a.tensor::<T>("z_attr").map_err(bad)?, &[c.k_attr]);
        let cond = unstack(&a.tensor::<T>("c").map_err(bad)?, &[c.cond_token_count, c.cond_dim]);
        let x0 = unstack(&a.tensor::<T>("x0").map_err(bad)?, &[c.token_count, c.dim]);
        let n = sample_identity.len();
        if z_attr.len() != n || cond.len() != n || x0.len() != n || e_ref.len() != z_id.len() || id_tokens.len() != z_id.len() {
            return Err(Error::format(path, "inconsistent tensor counts"));
        }
        let identities = z_id
            .into_iter()
            .zip(e_ref)
            .zip(id_tokens)
            .enumerate()
            .map(|(id_code, ((z_id, e_ref), id_tokens))| IdentityRecord {
                id_code,
                z_id,
                e_ref,
                id_tokens,
            })
            .collect::<Vec<_>>();
        if sample_identity.iter().any(|&i| i >= identities.len()) {
            return Err(Error::format(path, "sample refers to an unknown identity"));
        }
        let samples = sample_identity
            .into_iter()
            .zip(z_attr)
            .zip(cond)
            .zip(x0)
            .map(|(((identity, z_attr), c), x0)| Sample { identity, z_attr, c, x0 })
            .collect();
        Ok(Self {
            seed: a.get("seed").map_err(bad)?,
            per_id: a.get("per_id").map_err(bad)?,
            world,
            identities,
            samples,
            train: a.get("train").map_err(bad)?,
            validation: a.get("validation").map_err(bad)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, path)
    }
}

/// Identifies a dataset well enough to catch files paired with the wrong one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub seed: u64,
    pub num_ids: usize,
    pub num_samples: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn reference(&self) -> DatasetRef {
        DatasetRef {
            seed: self.seed,
            num_ids: self.num_ids(),
            num_samples: self.samples.len(),
        }
    }
}

/// Generated samples, each tagged with the dataset sample whose prompt and identity produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSet<T> {
    pub dataset: DatasetRef,
    pub requests: Vec<usize>,
    pub outputs: Vec<Tensor<T>>,
    /// Free-form provenance (sampler settings, checkpoint, noise seed).
    pub info: serde_json::Value,
}

impl<T: Scalar> GenerationSet<T> {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("generations");
        a.set("dataset", &self.dataset).unwrap();
        a.set("requests", &self.requests).unwrap();
        a.set("info", &self.info).unwrap();
        for (k, x) in self.outputs.iter().enumerate() {
            a.push(format!("gen.{k}"), x);
        }
        a
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        a.expect_kind("generations", path)?;
        let bad = |e: Error| Error::format(path, e.to_string());
        let requests: Vec<usize> = a.get("requests").map_err(bad)?;
        let outputs = (0..requests.len())
            .map(|k| a.tensor::<T>(&format!("gen.{k}")).map_err(bad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset: a.get("dataset").map_err(bad)?,
            requests,
            outputs,
            info: a.get("info").map_err(bad)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, path)
    }

    /// Pairs every output with its request, checking that the dataset is the one sampled from.
    pub fn resolve(&self, dataset: &Dataset<T>) -> Result<Vec<Generation<T>>> {
        if self.dataset != dataset.reference() {
            return Err(Error::Mismatch(format!(
                "generations were made from dataset {:?}, not {:?}",
                self.dataset,
                dataset.reference()
            )));
        }
        let want = [dataset.world.token_count, dataset.world.dim];
        self.requests
            .iter()
            .zip(&self.outputs)
            .map(|(&idx, x)| {
                let s = dataset
                    .samples
                    .get(idx)
                    .ok_or_else(|| Error::Mismatch(format!("request refers to sample {idx}")))?;
                if x.shape() != want {
                    return Err(Error::Mismatch(format!("generation shape {:?}, dataset samples are {want:?}", x.shape())));
                }
                Ok(Generation {
                    identity: s.identity,
                    z_attr: s.z_attr.clone(),
                    sample: x.clone(),
                })
            })
            .collect()
    }
}

/// One generated sample together with the request that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T> {
    pub identity: usize,
    /// Requested attributes (the latent the prompt encodes).
    pub z_attr: Tensor<T>,
    pub sample: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityMetrics {
    pub identity: usize,
    pub count: usize,
    pub facesim: f64,
    pub editdiv: f64,
    pub promptfollow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub facesim: f64,
    pub editdiv: f64,
    pub promptfollow: f64,
    pub per_identity: Vec<IdentityMetrics>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "identity,facesim,editdiv,promptfollow";

    /// Per-identity rows followed by an `all` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.per_identity {
            out.push_str(&format!("{},{},{},{}\n", r.identity, r.facesim, r.editdiv, r.promptfollow));
        }
        out.push_str(&format!("all,{},{},{}\n", self.facesim, self.editdiv, self.promptfollow));
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn eval_metrics<T: Scalar>(
    world: &World<T>,
    generations: &[Generation<T>],
    dataset: &Dataset<T>,
) -> Result<MetricsReport> {
    if generations.is_empty() {
        return Err(Error::Usage("no generations to evaluate".into()));
    }
    let n_ids = dataset.num_ids();
    let mut face = vec![Vec::new(); n_ids];
    let mut follow = vec![Vec::new(); n_ids];
    let mut readouts: Vec<Vec<Tensor<T>>> = vec![Vec::new(); n_ids];
    for g in generations {
        let rec = dataset.identities.get(g.identity).ok_or_else(|| {
            Error::Config(format!("generation refers to identity {} but the dataset has {n_ids}", g.identity))
        })?;
        face[g.identity].push(cosine(&world.id_encode(&g.sample)?, &rec.e_ref)?.as_f64());
        let r = world.attr_readout(&g.sample)?;
        follow[g.identity].push(cosine(&r, &g.z_attr)?.as_f64());
        readouts[g.identity].push(r);
    }
    let mut per_identity = Vec::new();
    let (mut all_pairs, mut all_face, mut all_follow) = (Vec::new(), Vec::new(), Vec::new());
    for id in 0..n_ids {
        if face[id].is_empty() {
            continue;
        }
        let rs = &readouts[id];
        let mut pairs = Vec::new();
        for i in 0..rs.len() {
            for j in i + 1..rs.len() {
                pairs.push(rs[i].sub(&rs[j])?.norm().as_f64());
            }
        }
        per_identity.push(IdentityMetrics {
            identity: id,
            count: rs.len(),
            facesim: mean(&face[id]),
            editdiv: mean(&pairs),
            promptfollow: mean(&follow[id]),
        });
        all_pairs.extend(pairs);
        all_face.extend_from_slice(&face[id]);
        all_follow.extend_from_slice(&follow[id]);
    }
    Ok(MetricsReport {
        facesim: mean(&all_face),
        editdiv: mean(&all_pairs),
        promptfollow: mean(&all_follow),
        per_identity,
    })
}

/// Fraction of random triples `(a, b, c)` with `e(G(z, a))·e(G(z, b)) > e(G(z, a))·e(G(z', c))`.
pub fn separability_rate<T: Scalar>(world: &World<T>, trials: usize, seed: u64) -> Result<f64> {
    let c = world.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0usize;
    for _ in 0..trials {
        let z = Tensor::randn(&[c.k_id], T::one(), &mut rng);
        let z2 = Tensor::randn(&[c.k_id], T::one(), &mut rng);
        let [a, b, d] = [(); 3].map(|_| Tensor::randn(&[c.k_attr], T::one(), &mut rng));
        let ea = world.id_encode(&world.generate(&z, &a)?)?;
        let eb = world.id_encode(&world.generate(&z, &b)?)?;
        let ed = world.id_encode(&world.generate(&z2, &d)?)?;
        if ea.dot(&eb)? > ea.dot(&ed)? {
            wins += 1;
        }
    }
    Ok(wins as f64 / trials as f64)
}

/// Pooled `R²` of [`World::attr_readout`] against the true attribute latent.
pub fn readout_r2<T: Scalar>(world: &World<T>, trials: usize, seed: u64) -> Result<f64> {
    let c = world.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truth = Vec::with_capacity(trials);
    let mut pred = Vec::with_capacity(trials);
    for _ in 0..trials {
        let z = Tensor::randn(&[c.k_id], T::one(), &mut rng);
        let a = Tensor::randn(&[c.k_attr], T::one(), &mut rng);
        pred.push(world.attr_readout(&world.generate(&z, &a)?)?);
        truth.push(a);
    }
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for k in 0..c.k_attr {
        let m = truth.iter().map(|t| t.data()[k].as_f64()).sum::<f64>() / trials as f64;
        for (t, p) in truth.iter().zip(&pred) {
            let (tv, pv) = (t.data()[k].as_f64(), p.data()[k].as_f64());
            ss_res += (tv - pv).powi(2);
            ss_tot += (tv - m).powi(2);
        }
    }
    Ok(1.0 - ss_res / ss_tot)
}
