use nalgebra::{DMatrix, DVector};

use super::config::ExperimentConfig;
use super::results::{Metric, ResultTable};
use super::{per_seed, RunOutput};
use crate::error::Result;
use crate::hyphylearn::toy::{run_toy_detailed, ToyArtifacts, ToyGaussian, ToySettings};
use crate::hyphylearn::{LabeledDataset, TrainingConfig};

fn toy_from(cfg: &ExperimentConfig) -> Result<(ToyGaussian, ToySettings)> {
    let v = |k: &str| -> Result<DVector<f64>> { Ok(DVector::from_vec(cfg.f64s(k)?)) };
    let toy = ToyGaussian {
        mu_true: [v("toy.mu0")?, v("toy.mu1")?],
        mu_est: [v("toy.mu0_hat")?, v("toy.mu1_hat")?],
        sigma: DMatrix::from_row_slice(2, 2, &cfg.f64s("toy.sigma")?),
    };
    let lr = cfg.f64("toy.lr")?;
    let base = ToySettings::default();
    let settings = ToySettings {
        n_real: cfg.usize("toy.n_real")?,
        n_synthetic: cfg.usize("toy.n_synthetic")?,
        n_test: cfg.usize("toy.n_test")?,
        width: cfg.usize("toy.width")?,
        train: TrainingConfig {
            n_train_steps: cfg.usize("toy.steps")?,
            batch_size: cfg.usize("toy.batch_size")?,
            lr_mapper: lr,
            lr_classifier: lr,
            lr_discriminator: lr,
            n_synthetic: cfg.usize("toy.n_synthetic")?,
            ..base.train
        },
    };
    Ok((toy, settings))
}

pub(super) fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let (toy, settings) = toy_from(cfg)?;
    let seeds = cfg.seeds()?;
    let runs = per_seed(&seeds, |seed| run_toy_detailed(&toy, &settings, seed))?;
    let tv = toy.tv_bounds()?;
    let mut table = ResultTable::new("none");
    for (&seed, (o, _)) in seeds.iter().zip(&runs) {
        table.push(0.0, "hyphylearn", Metric::Accuracy, seed, o.accuracy_hybrid)?;
        table.push(0.0, "hyphylearn", Metric::DHat, seed, o.proxy_adversarial)?;
        table.push(0.0, "synthetic-only", Metric::Accuracy, seed, o.accuracy_synthetic_only)?;
        table.push(0.0, "identity-map", Metric::DHat, seed, o.proxy_identity)?;
        table.push(0.0, "model-class0", Metric::TvBound, seed, tv[0])?;
        table.push(0.0, "model-class1", Metric::TvBound, seed, tv[1])?;
    }
    let (first, art) = seeds.iter().zip(&runs).min_by_key(|(s, _)| **s).map(|(s, r)| (*s, &r.1)).expect("seeds are nonempty");
    let n_plot = cfg.usize("toy.n_plot")?;
    Ok(RunOutput {
        table,
        extra_files: vec![
            ("toy_mapped_samples.csv".into(), mapped_samples_csv(art, first, n_plot)?),
            ("toy_means.csv".into(), means_csv(&toy, art, first)?),
        ],
    })
}

fn first_rows(d: &LabeledDataset, n: usize) -> (DMatrix<f64>, Vec<usize>) {
    let n = n.min(d.len());
    (d.features.columns(0, n).into_owned(), d.labels[..n].to_vec())
}

/// `space,domain,class,x0,x1` for the input rows and their images under
/// the learned map.
fn mapped_samples_csv(art: &ToyArtifacts, seed: u64, n_plot: usize) -> Result<String> {
    let mut out = format!("#schema=hyphy-toy-samples/1 seed={seed}\nspace,domain,class,x0,x1\n");
    for (domain, d) in [("real", &art.real), ("synthetic", &art.synthetic)] {
        let (x, y) = first_rows(d, n_plot);
        let z = art.classifier.embed(&x)?;
        for (space, m) in [("input", &x), ("feature", &z)] {
            for (j, c) in y.iter().enumerate() {
                let col = m.column(j);
                let rest: Vec<String> = col.iter().map(|v| v.to_string()).collect();
                out.push_str(&format!("{space},{domain},{c},{}\n", rest.join(",")));
            }
        }
    }
    Ok(out)
}

/// Class means in both spaces: the true and estimated model means, and
/// the empirical means of the real and synthetic rows before and after
/// the map.
fn means_csv(toy: &ToyGaussian, art: &ToyArtifacts, seed: u64) -> Result<String> {
    let mut out = format!("#schema=hyphy-toy-means/1 seed={seed}\nspace,source,class,x0,x1\n");
    let row = |out: &mut String, space: &str, source: &str, class: usize, v: &DVector<f64>| {
        let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!("{space},{source},{class},{}\n", vals.join(",")));
    };
    for c in 0..2 {
        row(&mut out, "input", "model-true", c, &toy.mu_true[c]);
        row(&mut out, "input", "model-estimated", c, &toy.mu_est[c]);
    }
    for (source, d) in [("real", &art.real), ("synthetic", &art.synthetic)] {
        let z = art.classifier.embed(&d.features)?;
        for c in 0..2 {
            let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            let mean = |m: &DMatrix<f64>| m.select_columns(&idx).column_mean();
            row(&mut out, "input", source, c, &mean(&d.features));
            row(&mut out, "feature", source, c, &mean(&z));
        }
    }
    Ok(out)
}
