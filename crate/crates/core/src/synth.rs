//! Synthetic paired spatial RNA + protein data with known spatial domains.
//!
//! Spots sit on a unit grid and are split into Voronoi domains. RNA counts are
//! Poisson draws from per-domain marker programs and from a few smooth spatial
//! programs (gene modules following a wave over the grid). Protein counts are
//! a fixed non-negative linear map of the RNA counts plus Gaussian noise,
//! clamped at zero.
//!
//! `seed` fixes the generative parameters (gene programs, the linear map);
//! `sample_seed` fixes the tissue layout and the random draws. Two datasets
//! with the same `seed` and different `sample_seed` share one ground truth.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::SpatialOmicsDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_spots: usize,
    pub n_genes: usize,
    pub n_proteins: usize,
    pub n_domains: usize,
    /// Standard deviation of the additive protein noise.
    pub noise: f64,
    pub seed: u64,
    pub sample_seed: u64,
    /// Genes per domain marker block and per spatial program module.
    pub markers_per_domain: usize,
    /// Number of smooth spatial gene programs on top of the domain markers.
    pub n_programs: usize,
    /// Log fold change of a marker gene inside its domain.
    pub marker_log_fold: f64,
    /// Mean expected count of a typical gene, before library-size variation.
    pub depth: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_spots: 500,
            n_genes: 1000,
            n_proteins: 10,
            n_domains: 3,
            noise: 0.1,
            seed: 0,
            sample_seed: 0,
            markers_per_domain: 30,
            n_programs: 0,
            marker_log_fold: 2.0,
            depth: 10.0,
        }
    }
}

impl SynthConfig {
    /// Same ground truth, independent tissue sample.
    pub fn held_out(&self) -> Self {
        Self {
            sample_seed: self.sample_seed ^ 0x5DEE_CE66_D1CE_5EED,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_spots == 0 || self.n_proteins == 0 || self.n_domains == 0 {
            return Err(Error::Config("spots, proteins and domains must be positive".into()));
        }
        if self.n_domains > self.n_spots {
            return Err(Error::Config(format!(
                "{} domains cannot be placed on {} spots",
                self.n_domains, self.n_spots
            )));
        }
        if self.markers_per_domain == 0 || (self.n_domains + self.n_programs) * self.markers_per_domain > self.n_genes {
            return Err(Error::Config(format!(
                "{} genes cannot hold {} blocks of {} genes",
                self.n_genes,
                self.n_domains + self.n_programs,
                self.markers_per_domain
            )));
        }
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return Err(Error::Config(format!("depth must be positive, got {}", self.depth)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: SpatialOmicsDataset,
    /// Ground-truth domain per spot.
    pub labels: Vec<usize>,
    /// G×P non-negative map from RNA counts to noiseless protein counts.
    pub protein_map: Array2<f64>,
}

/// A plane wave over the grid, in [-1, 1].
#[derive(Clone, Copy, Debug)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, x: f64, y: f64) -> f64 {
        (self.fx * x + self.fy * y + self.phase).sin()
    }
}

/// Ground-truth quantities shared by every sample of one `seed`.
struct Programs {
    /// G×K expected counts per gene and domain (before library scaling).
    rates: Array2<f64>,
    waves: Vec<Wave>,
    /// Per gene: the spatial program it follows and its log amplitude.
    program_of: Vec<Option<(usize, f64)>>,
    protein_map: Array2<f64>,
}

fn programs(cfg: &SynthConfig, side: usize) -> Programs {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = cfg.n_genes;
    let k = cfg.n_domains;
    let m = cfg.markers_per_domain;
    // Log-normal with mean `depth`.
    let base = LogNormal::new(cfg.depth.ln() - 0.5, 1.0).expect("valid log-normal");
    let mut rates = Array2::zeros((g, k));
    for gene in 0..g {
        let r: f64 = base.sample(&mut rng);
        rates.row_mut(gene).fill(r);
    }
    // Block b covers genes [b·m, (b+1)·m). Blocks 0..K are domain markers,
    // the next `n_programs` blocks are spatial modules.
    for d in 0..k {
        for gene in d * m..(d + 1) * m {
            let boost = rng.random_range(1.0..3.0);
            for dd in 0..k {
                rates[[gene, dd]] *= boost;
            }
            rates[[gene, d]] *= cfg.marker_log_fold.exp();
        }
    }
    let period = std::f64::consts::TAU / side.max(1) as f64;
    let waves: Vec<Wave> = (0..cfg.n_programs)
        .map(|_| Wave {
            fx: period * rng.random_range(-1.5..1.5),
            fy: period * rng.random_range(-1.5..1.5),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let mut program_of = vec![None; g];
    for q in 0..cfg.n_programs {
        for slot in program_of.iter_mut().skip((k + q) * m).take(m) {
            *slot = Some((q, rng.random_range(0.5..1.0)));
        }
    }

    let p = cfg.n_proteins;
    let blocks = k + cfg.n_programs;
    let mut protein_map = Array2::zeros((g, p));
    for prot in 0..p {
        let lo = (prot % blocks) * m;
        for _ in 0..m.min(6) {
            let gene = lo + rng.random_range(0..m);
            protein_map[[gene, prot]] += rng.random_range(0.5..1.5);
        }
        for _ in 0..4 {
            let gene = rng.random_range(0..g);
            protein_map[[gene, prot]] += rng.random_range(0.0..0.2);
        }
    }
    Programs {
        rates,
        waves,
        program_of,
        protein_map,
    }
}

/// Generates one dataset.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let n = cfg.n_spots;
    let side = (n as f64).sqrt().ceil() as usize;
    let truth = programs(cfg, side);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ cfg.seed);
    let coords = Array2::from_shape_fn((n, 2), |(i, c)| if c == 0 { (i % side) as f64 } else { (i / side) as f64 });

    let centers: Vec<(f64, f64)> = (0..cfg.n_domains)
        .map(|_| (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64)))
        .collect();
    let mut labels: Vec<usize> = (0..n)
        .map(|i| {
            let (x, y) = (coords[[i, 0]], coords[[i, 1]]);
            let mut best = (f64::INFINITY, 0);
            for (d, &(cx, cy)) in centers.iter().enumerate() {
                let dist = (x - cx).powi(2) + (y - cy).powi(2);
                if dist < best.0 {
                    best = (dist, d);
                }
            }
            best.1
        })
        .collect();
    // Every domain owns at least its closest spot.
    for (d, &(cx, cy)) in centers.iter().enumerate() {
        if !labels.contains(&d) {
            let closest = (0..n)
                .min_by(|&a, &b| {
                    let da = (coords[[a, 0]] - cx).powi(2) + (coords[[a, 1]] - cy).powi(2);
                    let db = (coords[[b, 0]] - cx).powi(2) + (coords[[b, 1]] - cy).powi(2);
                    da.total_cmp(&db)
                })
                .expect("n > 0");
            labels[closest] = d;
        }
    }

    let library = LogNormal::new(0.0, 0.2).expect("valid log-normal");
    let g = cfg.n_genes;
    let mut rna = Array2::zeros((n, g));
    for i in 0..n {
        let scale: f64 = library.sample(&mut rng);
        let field: Vec<f64> = truth.waves.iter().map(|w| w.at(coords[[i, 0]], coords[[i, 1]])).collect();
        for gene in 0..g {
            let spatial = truth.program_of[gene].map_or(0.0, |(q, amp)| amp * field[q]);
            let lambda = scale * truth.rates[[gene, labels[i]]] * spatial.exp();
            rna[[i, gene]] = Poisson::new(lambda).map(|d| d.sample(&mut rng)).unwrap_or(0.0);
        }
    }
    // Guarantee every spot has some RNA.
    for i in 0..n {
        if rna.row(i).sum() == 0.0 {
            rna[[i, i % g]] = 1.0;
        }
    }

    let mut protein = rna.dot(&truth.protein_map);
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("valid normal");
        protein.mapv_inplace(|v| (v + normal.sample(&mut rng)).max(0.0));
    }

    let spot_ids = (0..n).map(|i| format!("spot_{i:05}")).collect();
    let gene_names = (0..g).map(|j| format!("gene_{j:05}")).collect();
    let protein_names = (0..cfg.n_proteins).map(|p| format!("protein_{p:03}")).collect();
    let dataset = SpatialOmicsDataset::new(spot_ids, coords, rna, gene_names, Some((protein, protein_names)))?;
    Ok(SyntheticData {
        dataset,
        labels,
        protein_map: truth.protein_map,
    })
}
