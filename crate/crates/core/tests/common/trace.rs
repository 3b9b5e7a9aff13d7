//! Scripted 3-class, 10-sample stream run through the support set and the
//! brute-force oracle side by side.

use super::oracles::{Scoring, SupportOracle};
use oftta::nn::LinearHead;
use oftta::prototype::{adapt_batch, adapt_batch_scored, init_support, Capacity, SupportSet};
use oftta::tensor::Matrix;

pub fn scripted() -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let w = vec![vec![2.0, 0.2, 0.1], vec![0.1, 1.5, 0.3], vec![0.2, 0.1, 1.8]];
    let b = vec![0.1, -0.2, 0.05];
    let batches = vec![
        vec![vec![1.0, 0.1, 0.0], vec![0.1, 0.9, 0.2], vec![0.0, 0.2, 1.1], vec![0.9, 0.3, 0.1]],
        vec![vec![0.2, 1.2, 0.1], vec![0.1, 0.1, 0.8], vec![0.6, 0.55, 0.1]],
        vec![vec![1.1, 0.0, 0.2], vec![0.3, 0.35, 0.9], vec![0.05, 1.0, 0.05]],
    ];
    (w, b, batches)
}

pub struct ScriptRun {
    /// Per-batch predictions from the library.
    pub got: Vec<Vec<usize>>,
    /// Per-batch predictions from the oracle.
    pub want: Vec<Vec<usize>>,
    pub got_pseudo: Vec<Vec<usize>>,
    pub want_pseudo: Vec<Vec<usize>>,
    /// Largest centroid deviation seen after any batch.
    pub max_centroid_err: f64,
    pub oracle: SupportOracle,
    pub set: SupportSet,
}

impl ScriptRun {
    pub fn matches(&self, tol: f64) -> bool {
        self.got == self.want
            && self.got_pseudo == self.want_pseudo
            && self.max_centroid_err <= tol
            && (0..3).all(|k| self.set.class(k).len() == self.oracle.lists[k].len())
    }
}

pub fn run_script(capacity: usize, linear: bool) -> ScriptRun {
    let (w, b, batches) = scripted();
    let wf: Vec<Vec<f32>> = w.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    let h = LinearHead::new(Matrix::from_rows(&wf).unwrap(), b.iter().map(|&v| v as f32).collect()).unwrap();
    let mut set = init_support(&h).unwrap();
    let mut oracle = SupportOracle::seeded(&w, Some(capacity));
    let mut run = ScriptRun {
        got: Vec::new(),
        want: Vec::new(),
        got_pseudo: Vec::new(),
        want_pseudo: Vec::new(),
        max_centroid_err: 0.0,
        oracle: SupportOracle::seeded(&w, Some(capacity)),
        set: set.clone(),
    };
    for batch in &batches {
        let x = Matrix::from_rows(&batch.iter().map(|r| r.iter().map(|&v| v as f32).collect::<Vec<_>>()).collect::<Vec<_>>()).unwrap();
        let (adj, scoring) = if linear {
            let logits = h.forward(&x).unwrap();
            (adapt_batch_scored(&mut set, &x, &logits, Capacity::PerClass(capacity)).unwrap(), Scoring::Linear { weight: &w, bias: &b })
        } else {
            (adapt_batch(&mut set, &x, Capacity::PerClass(capacity)).unwrap(), Scoring::Cosine)
        };
        let (pseudo, preds) = oracle.step(batch, &scoring);
        run.got_pseudo.push(adj.pseudo_labels);
        run.want_pseudo.push(pseudo);
        run.got.push(adj.labels);
        run.want.push(preds);
        let c = set.centroids().unwrap();
        for (k, mu) in oracle.centroids().iter().enumerate() {
            for (d, v) in mu.iter().enumerate() {
                run.max_centroid_err = run.max_centroid_err.max((c.centroids.get(k, d) as f64 - v).abs());
            }
        }
    }
    run.oracle = oracle;
    run.set = set;
    run
}
