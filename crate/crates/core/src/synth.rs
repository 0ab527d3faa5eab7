//! Seeded generators for tasks with a known relationship structure.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TaskGraph;
use crate::inner::TaskData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Line,
    Tree,
    Star,
}

impl std::str::FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(Structure::Line),
            "tree" => Ok(Structure::Tree),
            "star" => Ok(Structure::Star),
            other => Err(Error::InvalidArgument(format!(
                "unknown structure '{other}' (expected line, tree or star)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub structure: Structure,
    pub n_tasks: usize,
    pub d: usize,
    pub samples_per_task: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// 20 tasks in 30 dimensions.
    pub fn line(seed: u64) -> Self {
        Self::defaults(Structure::Line, seed)
    }

    /// 31 tasks (five levels) in 30 dimensions.
    pub fn tree(seed: u64) -> Self {
        Self::defaults(Structure::Tree, seed)
    }

    /// 10 leaves plus a center, in 20 dimensions.
    pub fn star(seed: u64) -> Self {
        Self::defaults(Structure::Star, seed)
    }

    pub fn defaults(structure: Structure, seed: u64) -> Self {
        let (n_tasks, d) = match structure {
            Structure::Line => (20, 30),
            Structure::Tree => (31, 30),
            Structure::Star => (11, 20),
        };
        SynthSpec {
            structure,
            n_tasks,
            d,
            samples_per_task: 100,
            noise_std: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.d == 0 || self.samples_per_task == 0 {
            return Err(Error::InvalidArgument(
                "n_tasks, d and samples_per_task must be positive".into(),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
        }
        match self.structure {
            Structure::Tree if !(self.n_tasks + 1).is_power_of_two() => Err(
                Error::InvalidArgument(format!("a tree needs 2^L - 1 tasks, got {}", self.n_tasks)),
            ),
            Structure::Star if self.n_tasks < 2 || self.d != 2 * (self.n_tasks - 1) => {
                Err(Error::InvalidArgument(format!(
                    "a star with {} leaves needs d = {}, got {}",
                    self.n_tasks.saturating_sub(1),
                    2 * self.n_tasks.saturating_sub(1),
                    self.d
                )))
            }
            _ => Ok(()),
        }
    }
}

/// True task weights and the binary relationship structure.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub weights: DMatrix<f64>,
    pub adjacency: DMatrix<f64>,
}

fn gaussian_vec(rng: &mut impl Rng, d: usize, mean: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| mean + rng.sample::<f64, _>(StandardNormal))
}

fn drift(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    let bern = Bernoulli::new(0.7).expect("valid probability");
    DVector::from_fn(d, |_, _| {
        let u: f64 = rng.random();
        let b = if bern.sample(rng) { 1.0 } else { 0.0 };
        0.1 * u * b
    })
}

pub fn generate(spec: &SynthSpec) -> Result<(Vec<TaskData>, GroundTruth)> {
    spec.validate()?;
    let n = spec.n_tasks;
    let d = spec.d;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut w = DMatrix::zeros(n, d);
    let mut adj = DMatrix::zeros(n, n);
    let mut link = |a: usize, b: usize| {
        adj[(a, b)] = 1.0;
        adj[(b, a)] = 1.0;
    };

    match spec.structure {
        Structure::Line | Structure::Tree => {
            w.set_row(0, &gaussian_vec(&mut rng, d, 1.0).transpose());
            for t in 1..n {
                let parent = match spec.structure {
                    Structure::Line => t - 1,
                    _ => (t - 1) / 2,
                };
                let wt = w.row(parent).transpose() + drift(&mut rng, d);
                w.set_row(t, &wt.transpose());
                link(parent, t);
            }
        }
        Structure::Star => {
            for t in 1..n {
                let wt = gaussian_vec(&mut rng, d, 1.0);
                w.set_row(t, &wt.transpose());
                // the center copies the coordinate pair owned by leaf t
                w[(0, 2 * t - 2)] = wt[2 * t - 2];
                w[(0, 2 * t - 1)] = wt[2 * t - 1];
                link(0, t);
            }
        }
    }

    let tasks = (0..n)
        .map(|t| {
            let x = DMatrix::from_fn(spec.samples_per_task, d, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let noise = DVector::from_fn(spec.samples_per_task, |_, _| {
                spec.noise_std * rng.sample::<f64, _>(StandardNormal)
            });
            let y = &x * w.row(t).transpose() + noise;
            TaskData::new(x, y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        tasks,
        GroundTruth {
            weights: w,
            adjacency: adj,
        },
    ))
}

/// Unit-weight graph of the ground-truth structure.
pub fn ground_truth_graph(gt: &GroundTruth) -> TaskGraph {
    TaskGraph::from_adjacency(&gt.adjacency).expect("generated adjacency is a valid graph")
}

/// Small random bilevel instance: training and validation data for `n`
/// tasks and a complete graph with weights drawn from `[0.2, 0.9]`.
#[derive(Debug, Clone)]
pub struct RandomProblem {
    pub train: Vec<TaskData>,
    pub val: Vec<TaskData>,
    pub graph: TaskGraph,
}

pub fn random_problem(n: usize, d: usize, samples: usize, seed: u64) -> Result<RandomProblem> {
    if n < 2 || d == 0 || samples == 0 {
        return Err(Error::InvalidArgument(
            "random problem needs n >= 2, d >= 1 and samples >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = gaussian_vec(&mut rng, d, 0.0);
    let models: Vec<DVector<f64>> = (0..n)
        .map(|_| &base + gaussian_vec(&mut rng, d, 0.0) * 0.5)
        .collect();
    let mut draw = |w: &DVector<f64>| {
        let x = DMatrix::from_fn(samples, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DVector::from_fn(samples, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        let y = &x * w + noise;
        TaskData::new(x, y)
    };
    let train = models.iter().map(&mut draw).collect::<Result<Vec<_>>>()?;
    let val = models.iter().map(&mut draw).collect::<Result<Vec<_>>>()?;
    let edges: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, 0.2 + 0.7 * rng.random::<f64>()))
        .collect();
    Ok(RandomProblem {
        train,
        val,
        graph: TaskGraph::new(n, edges)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_adjacency_seven_tasks() {
        let spec = SynthSpec {
            n_tasks: 7,
            ..SynthSpec::tree(1)
        };
        let (_, gt) = generate(&spec).unwrap();
        let g = ground_truth_graph(&gt);
        assert_eq!(
            g.pairs(),
            vec![(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)]
        );
    }

    #[test]
    fn default_edge_counts() {
        let count = |s: SynthSpec| ground_truth_graph(&generate(&s).unwrap().1).n_edges();
        assert_eq!(count(SynthSpec::line(0)), 19);
        assert_eq!(count(SynthSpec::star(0)), 10);
        assert_eq!(count(SynthSpec::tree(0)), 30);
        let line = ground_truth_graph(&generate(&SynthSpec::line(0)).unwrap().1);
        assert!(line.pairs().iter().all(|&(i, j)| j == i + 1));
    }

    #[test]
    fn star_center_copies_leaf_pairs() {
        let (_, gt) = generate(&SynthSpec::star(3)).unwrap();
        for t in 1..11 {
            for c in [2 * t - 2, 2 * t - 1] {
                assert_eq!(gt.weights[(0, c)], gt.weights[(t, c)]);
            }
        }
    }

    #[test]
    fn invalid_sizes() {
        let bad_tree = SynthSpec {
            n_tasks: 10,
            ..SynthSpec::tree(0)
        };
        assert!(generate(&bad_tree).is_err());
        let bad_star = SynthSpec {
            d: 19,
            ..SynthSpec::star(0)
        };
        assert!(generate(&bad_star).is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&SynthSpec::line(11)).unwrap();
        let b = generate(&SynthSpec::line(11)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate(&SynthSpec::line(12)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn structure_parsing() {
        assert_eq!("star".parse::<Structure>().unwrap(), Structure::Star);
        assert!("ring".parse::<Structure>().is_err());
    }
}
