//! Seeded synthetic multi-scenario data.
//!
//! Every identity owns a latent identity vector and an "outfit" attribute
//! vector. A record's base vector has the layout `[identity | attribute | pad]`;
//! the scenario's heterogeneity transform is applied to the base for group-b
//! records, then the base is lifted into input space by a fixed orthogonal
//! matrix and perturbed with Gaussian noise.
//!
//! | kind              | group b transform                                      |
//! |-------------------|--------------------------------------------------------|
//! | `modality`        | attribute block zeroed (no colour in infrared)         |
//! | `clothing_change` | attribute block resampled for every image              |
//! | `resolution`      | base projected onto a fixed rank-r subspace            |

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Modality,
    ClothingChange,
    Resolution,
}

impl ScenarioKind {
    /// Whether the a/b split is observable from metadata. Clothing change is
    /// not, and gets divided by 2-means on representations instead.
    pub fn has_observed_groups(self) -> bool {
        !matches!(self, ScenarioKind::ClothingChange)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Modality => "modality",
            ScenarioKind::ClothingChange => "clothing_change",
            ScenarioKind::Resolution => "resolution",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modality" => Ok(ScenarioKind::Modality),
            "clothing_change" => Ok(ScenarioKind::ClothingChange),
            "resolution" => Ok(ScenarioKind::Resolution),
            other => Err(Error::Param(format!("unknown scenario kind {other:?}"))),
        }
    }
}

/// Homogeneous group within a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    A,
    B,
}

impl Group {
    pub const BOTH: [Group; 2] = [Group::A, Group::B];

    pub fn other(self) -> Group {
        match self {
            Group::A => Group::B,
            Group::B => Group::A,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::A => "a",
            Group::B => "b",
        }
    }
}

impl std::str::FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Group::A),
            "b" => Ok(Group::B),
            other => Err(Error::Param(format!("unknown group {other:?}"))),
        }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One (scenario, group) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub scenario: usize,
    pub group: Group,
}

impl GroupKey {
    pub fn new(scenario: usize, group: Group) -> Self {
        Self { scenario, group }
    }

    pub fn opposite(self) -> Self {
        Self { scenario: self.scenario, group: self.group.other() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario_id: usize,
    pub kind: ScenarioKind,
    pub num_identities: usize,
    pub images_per_group: usize,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub id_dim: usize,
    pub attr_dim: usize,
    pub input_dim: usize,
}

impl Dims {
    /// Rank of the resolution-loss subspace, `ceil(input_dim / 2)`.
    pub fn resolution_rank(&self) -> usize {
        self.input_dim.div_ceil(2)
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.id_dim > 0 && self.attr_dim > 0, Param, "id_dim and attr_dim must be positive");
        ensure!(
            self.input_dim >= self.id_dim + self.attr_dim,
            Param,
            "input_dim {} < id_dim {} + attr_dim {}",
            self.input_dim,
            self.id_dim,
            self.attr_dim
        );
        Ok(())
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self { id_dim: 16, attr_dim: 8, input_dim: 48 }
    }
}

/// One synthetic "image".
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub record_id: usize,
    pub scenario_id: usize,
    pub group: Group,
    /// Ground truth; only evaluation and diagnostics may read it.
    pub truth_identity: usize,
    pub raw: Vec<f64>,
}

/// What the training stages see: no identity field exists on this type.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub record_id: usize,
    pub scenario: usize,
    pub group: Group,
    pub raw: Vec<f64>,
}

impl TrainRecord {
    pub fn key(&self) -> GroupKey {
        GroupKey::new(self.scenario, self.group)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub specs: Vec<ScenarioSpec>,
    pub dims: Dims,
    pub seed: u64,
}

/// Generator internals, exposed for tests and diagnostics.
#[derive(Debug, Clone)]
pub struct Latents {
    /// Orthogonal `input_dim x input_dim` lift.
    pub lift: Mat,
    /// Identity vector per global identity id.
    pub identity: Vec<Vec<f64>>,
    /// Per record (same order as `Dataset::records`): base vector after the
    /// heterogeneity transform, before lift and noise.
    pub bases: Vec<Vec<f64>>,
}

/// Fixed transforms used by [`Heterogeneity::apply`].
#[derive(Debug, Clone)]
pub struct Heterogeneity {
    dims: Dims,
    /// Orthonormal basis (rows) of the resolution subspace.
    subspace: Mat,
}

impl Heterogeneity {
    pub fn new(dims: Dims, subspace: Mat) -> Result<Self> {
        dims.validate()?;
        ensure!(subspace.cols() == dims.input_dim, Shape, "subspace basis dim {} != input_dim {}", subspace.cols(), dims.input_dim);
        Ok(Self { dims, subspace })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    fn attr_range(&self) -> std::ops::Range<usize> {
        self.dims.id_dim..self.dims.id_dim + self.dims.attr_dim
    }

    /// Orthogonal projection onto the resolution subspace.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for u in self.subspace.iter_rows() {
            let c = dot(u, v);
            for (o, x) in out.iter_mut().zip(u) {
                *o += c * x;
            }
        }
        out
    }

    /// Applies the group's transform to a base vector. `resample` draws a
    /// fresh attribute block for clothing change.
    pub fn apply(
        &self,
        base: &[f64],
        kind: ScenarioKind,
        group: Group,
        resample: &mut dyn FnMut() -> Vec<f64>,
    ) -> Result<Vec<f64>> {
        ensure!(base.len() == self.dims.input_dim, Shape, "base has dim {}, expected {}", base.len(), self.dims.input_dim);
        let mut out = base.to_vec();
        if group == Group::A {
            return Ok(out);
        }
        let attr = self.attr_range();
        match kind {
            ScenarioKind::Modality => out[attr].iter_mut().for_each(|x| *x = 0.0),
            ScenarioKind::ClothingChange => {
                let fresh = resample();
                ensure!(fresh.len() == self.dims.attr_dim, Shape, "resampled attribute has dim {}", fresh.len());
                out[attr].copy_from_slice(&fresh);
            }
            ScenarioKind::Resolution => out = self.project(&out),
        }
        Ok(out)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// `k` orthonormal vectors in R^n (rows), by Gram-Schmidt on seeded Gaussians.
fn orthonormal_rows(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Mat {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v = gaussian(rng, n, 1.0);
        for _ in 0..2 {
            for u in &rows {
                let c = dot(u, &v);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nrm = dot(&v, &v).sqrt();
        if nrm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nrm);
            rows.push(v);
        }
    }
    Mat::from_rows(&rows).expect("equal-length rows")
}

/// Generates a dataset as a pure function of `(specs, dims, seed)`.
pub fn generate_dataset(specs: &[ScenarioSpec], dims: Dims, seed: u64) -> Result<Dataset> {
    generate_with_latents(specs, dims, seed).map(|(d, _)| d)
}

pub fn generate_with_latents(specs: &[ScenarioSpec], dims: Dims, seed: u64) -> Result<(Dataset, Latents)> {
    dims.validate()?;
    ensure!(!specs.is_empty(), Param, "at least one scenario is required");
    for (i, s) in specs.iter().enumerate() {
        ensure!(s.scenario_id == i, Param, "scenario {i} has scenario_id {}", s.scenario_id);
        ensure!(s.num_identities >= 2, Param, "scenario {i} needs >= 2 identities");
        ensure!(s.images_per_group >= 1, Param, "scenario {i} needs >= 1 image per group");
        ensure!(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite(), Param, "scenario {i} noise_sigma must be >= 0");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = dims.input_dim;
    let attr_std = 1.0 / (dims.attr_dim as f64).sqrt();
    // columns of the lift are the rows generated here; lift = rows^T
    let lift = {
        let rows = orthonormal_rows(&mut rng, d_in, d_in);
        let mut m = Mat::zeros(d_in, d_in);
        for i in 0..d_in {
            for j in 0..d_in {
                m.set(i, j, rows.get(j, i));
            }
        }
        m
    };

    let mut records = Vec::new();
    let mut bases = Vec::new();
    let mut identity = Vec::new();
    for spec in specs {
        let subspace = orthonormal_rows(&mut rng, dims.resolution_rank(), d_in);
        let het = Heterogeneity::new(dims, subspace)?;
        let first_identity = identity.len();
        let mut outfits = Vec::with_capacity(spec.num_identities);
        for _ in 0..spec.num_identities {
            let mut id = gaussian(&mut rng, dims.id_dim, 1.0);
            let n = dot(&id, &id).sqrt();
            id.iter_mut().for_each(|x| *x /= n);
            identity.push(id);
            outfits.push(gaussian(&mut rng, dims.attr_dim, attr_std));
        }
        for group in Group::BOTH {
            for j in 0..spec.num_identities {
                let gid = first_identity + j;
                for _ in 0..spec.images_per_group {
                    let mut base = vec![0.0; d_in];
                    base[..dims.id_dim].copy_from_slice(&identity[gid]);
                    let jitter = gaussian(&mut rng, dims.attr_dim, spec.noise_sigma);
                    for (k, (o, e)) in outfits[j].iter().zip(&jitter).enumerate() {
                        base[dims.id_dim + k] = o + e;
                    }
                    let base = het.apply(&base, spec.kind, group, &mut || gaussian(&mut rng, dims.attr_dim, attr_std))?;
                    let noise = gaussian(&mut rng, d_in, spec.noise_sigma);
                    let raw: Vec<f64> = (0..d_in).map(|i| dot(lift.row(i), &base) + noise[i]).collect();
                    records.push(ImageRecord {
                        record_id: records.len(),
                        scenario_id: spec.scenario_id,
                        group,
                        truth_identity: gid,
                        raw,
                    });
                    bases.push(base);
                }
            }
        }
    }

    Ok((Dataset { records, specs: specs.to_vec(), dims, seed }, Latents { lift, identity, bases }))
}

/// Default desk-scale scenario list: modality, clothing change, resolution.
pub fn default_specs(num_identities: usize, images_per_group: usize, noise_sigma: f64) -> Vec<ScenarioSpec> {
    [ScenarioKind::Modality, ScenarioKind::ClothingChange, ScenarioKind::Resolution]
        .into_iter()
        .enumerate()
        .map(|(i, kind)| ScenarioSpec { scenario_id: i, kind, num_identities, images_per_group, noise_sigma })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    specs: Vec<ScenarioSpec>,
    dims: Dims,
    seed: u64,
}

impl Dataset {
    pub fn num_scenarios(&self) -> usize {
        self.specs.len()
    }

    /// Local identity index within its scenario.
    fn local_identity(&self, r: &ImageRecord) -> usize {
        let offset: usize = self.specs[..r.scenario_id].iter().map(|s| s.num_identities).sum();
        r.truth_identity - offset
    }

    /// Number of identities per scenario reserved for training
    /// (`round(fraction * n)`, kept within `[1, n - 1]`).
    pub fn train_identity_count(&self, scenario: usize, train_fraction: f64) -> usize {
        let n = self.specs[scenario].num_identities;
        ((train_fraction * n as f64).round() as usize).clamp(1, n - 1)
    }

    /// Whether the record belongs to a training identity. The first
    /// identities of each scenario train, the rest are held out.
    pub fn is_train(&self, r: &ImageRecord, train_fraction: f64) -> bool {
        self.local_identity(r) < self.train_identity_count(r.scenario_id, train_fraction)
    }

    pub fn train_records(&self, train_fraction: f64) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| self.is_train(r, train_fraction)).collect()
    }

    pub fn test_records(&self, train_fraction: f64) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| !self.is_train(r, train_fraction)).collect()
    }

    /// Writes `spec.json` and `records.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let spec = SpecFile { specs: self.specs.clone(), dims: self.dims, seed: self.seed };
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
        let mut w = csv::WriterBuilder::new().flexible(true).from_path(dir.join("records.csv"))?;
        let mut header = vec!["record_id".to_string(), "scenario_id".into(), "group".into(), "truth_identity".into()];
        header.extend((0..self.dims.input_dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.record_id.to_string(),
                r.scenario_id.to_string(),
                r.group.as_str().to_string(),
                r.truth_identity.to_string(),
            ];
            // `{}` on f64 prints the shortest string that parses back exactly
            row.extend(r.raw.iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: SpecFile = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
        spec.dims.validate()?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(dir.join("records.csv"))?;
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let field = |i: usize| row.get(i).ok_or_else(|| Error::Decode(format!("records.csv: missing column {i}")));
            let int = |i: usize| -> Result<usize> {
                field(i)?.parse().map_err(|e| Error::Decode(format!("records.csv column {i}: {e}")))
            };
            let raw = (4..row.len())
                .map(|i| field(i)?.parse::<f64>().map_err(|e| Error::Decode(format!("records.csv column {i}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            ensure!(raw.len() == spec.dims.input_dim, Decode, "record has {} features, expected {}", raw.len(), spec.dims.input_dim);
            records.push(ImageRecord {
                record_id: int(0)?,
                scenario_id: int(1)?,
                group: field(2)?.parse()?,
                truth_identity: int(3)?,
                raw,
            });
        }
        Ok(Dataset { records, specs: spec.specs, dims: spec.dims, seed: spec.seed })
    }
}

/// Draws a seed for a derived stream from a parent seed and a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}
