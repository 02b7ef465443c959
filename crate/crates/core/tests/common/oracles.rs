//! Hand-worked loss values.

use last_core::adapt::{classification_loss, last_loss};
use last_core::pretrain::{contrastive_anchor_loss, contrastive_loss, cosine_sim, init_loss, reconstruction_loss};
use ndarray::{array, Array1, Array4};

pub struct Case {
    pub name: &'static str,
    pub got: f64,
    pub want: f64,
    pub tolerance: f64,
}

impl Case {
    pub fn passes(&self) -> bool {
        self.error() <= self.tolerance
    }

    /// Relative error, or absolute error when the expected value is 0.
    pub fn error(&self) -> f64 {
        if self.want == 0.0 {
            self.got.abs()
        } else {
            ((self.got - self.want) / self.want).abs()
        }
    }
}

fn cell(values: &[f64]) -> Array4<f64> {
    Array4::from_shape_vec((values.len(), 1, 1, 1), values.to_vec()).unwrap()
}

pub fn loss_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let mut push = |name, got: f64, want: f64| out.push(Case { name, got, want, tolerance: 1e-6 });

    let t = Array4::from_shape_fn((3, 2, 2, 4), |(a, b, c, d)| (a * 7 + b * 5 + c * 3 + d) as f64 * 0.1 - 1.0);
    push("reconstruction T*=T", reconstruction_loss(t.view(), t.view()).unwrap(), 0.0);
    push(
        "reconstruction T*=(1,3) T=(0,0)",
        reconstruction_loss(cell(&[1.0, 3.0]).view(), cell(&[0.0, 0.0]).view()).unwrap(),
        2.0,
    );
    let shifted = t.mapv(|v| v + 0.3 * v.sin());
    let base = reconstruction_loss(shifted.view(), t.view()).unwrap();
    let scaled = &t + &((&shifted - &t) * 2.5);
    push("reconstruction homogeneity c=2.5", reconstruction_loss(scaled.view(), t.view()).unwrap(), 2.5 * base);

    let z = array![0.3, -1.2, 2.0];
    push("cosine self", cosine_sim(z.view(), z.view(), 1e-8), 1.0);
    push("cosine orthogonal", cosine_sim(array![1.0, 0.0].view(), array![0.0, 1.0].view(), 1e-8), 0.0);
    push("cosine zero vector", cosine_sim(Array1::zeros(3).view(), z.view(), 1e-8), 0.0);

    let (e0, e1) = (array![1.0, 0.0], array![0.0, 1.0]);
    push(
        "contrastive single negative",
        contrastive_anchor_loss(e0.view(), e0.view(), &[e1.view()], 0.5, 1e-8),
        (1.0 + (-2.0f64).exp()).ln(),
    );
    push("contrastive closed form constant", (1.0 + (-2.0f64).exp()).ln(), 0.126_928_011_042_973_1);
    for m in [2usize, 3, 5] {
        let zs = vec![z.clone(); 2 * m];
        let ids: Vec<usize> = (0..2 * m).map(|i| i / 2).collect();
        let name = match m {
            2 => "contrastive identical M=2",
            3 => "contrastive identical M=3",
            _ => "contrastive identical M=5",
        };
        push(name, contrastive_loss(&zs, &ids, 0.5, 1e-8).unwrap(), ((2 * m - 1) as f64).ln());
    }

    push("init_loss defaults", init_loss(0.2, 0.4, 1.0, 0.5), 0.4);
    push("init_loss lambda2=0", init_loss(0.37, 0.4, 1.0, 0.0), 0.37);
    push("init_loss zero", init_loss(0.0, 0.0, 1.0, 0.5), 0.0);

    let cls = |l: [f64; 2], label: usize| classification_loss(array![[l[0], l[1]]].view(), &[label]).unwrap();
    push("classification saturated", cls([20.0, -20.0], 0), 0.0);
    push("classification uniform real", cls([0.0, 0.0], 0), 2f64.ln());
    push("classification uniform fake", cls([0.0, 0.0], 1), 2f64.ln());
    push("classification (-3,3) real", cls([-3.0, 3.0], 0), (1.0 + 6f64.exp()).ln());

    push("last_loss lambda=0.5", last_loss(0.8, 0.4, 0.5).unwrap(), 0.6);
    push("last_loss lambda=1", last_loss(0.8, 0.4, 1.0).unwrap(), 0.8);
    // Saturated cross-entropy is held to a tighter absolute bound.
    out.iter_mut().filter(|c| c.name == "classification saturated").for_each(|c| c.tolerance = 1e-8);
    out
}
