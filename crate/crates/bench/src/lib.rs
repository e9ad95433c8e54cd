//! Shared fixture for the benchmarks: a synthetic problem with a trained-shape
//! labeling function and a stochastic target model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use twostep_core::bilevel::{BilevelState, InnerLabels, InnerProblem, SecondStepConfig, TargetModelState};
use twostep_core::datamodel::{generate_synthetic_msda, MultiDomainDataset, SyntheticShiftConfig};
use twostep_core::first_step::{LabelingFunctionState, LabelingNet};
use twostep_core::nn::{Activation, BackboneSpec};
use twostep_core::pseudolabel::gumbel_noise;
use twostep_core::stochastic_head::draw_epsilon;
use twostep_core::SgdConfig;

pub struct Fixture {
    pub dataset: MultiDomainDataset,
    pub labeling: LabelingFunctionState,
    pub target: TargetModelState,
    pub inputs: Vec<f64>,
    pub noise: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl Fixture {
    /// `hidden` sizes the MLP; `batch` rows of target data.
    pub fn new(hidden: &[usize], batch: usize) -> Self {
        let dataset = generate_synthetic_msda(&SyntheticShiftConfig {
            input_dim: 16,
            ambient_std: 0.1,
            ..Default::default()
        })
        .expect("synthetic data");
        let net = LabelingNet::new(
            BackboneSpec::Mlp {
                input_dim: 16,
                hidden: hidden.to_vec(),
                activation: Activation::Tanh,
            },
            3,
        )
        .expect("net");
        let labeling = LabelingFunctionState::new(net, SgdConfig::plain(0.05), 0).expect("state");
        let target =
            TargetModelState::from_labeling(&labeling.net, &labeling.theta, true, SgdConfig::plain(0.01)).expect("target");
        let t = dataset.target_train_eval_set().expect("target set");
        let inputs: Vec<f64> = t.inputs.iter().take(batch).flatten().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = gumbel_noise(&mut rng, batch * 3);
        let feature = *hidden.last().expect("hidden layers");
        let epsilon = draw_epsilon(&mut rng, batch * feature);
        Self {
            dataset,
            labeling,
            target,
            inputs,
            noise,
            epsilon,
        }
    }

    pub fn problem(&self) -> InnerProblem<'_> {
        let rows = self.inputs.len() / 16;
        InnerProblem {
            labeling: &self.labeling.net,
            target: &self.target.net,
            inputs: &self.inputs,
            labels: InnerLabels::Gumbel {
                noise: self.noise.clone(),
                temperature: 1.0,
                straight_through: true,
            },
            mask: vec![true; rows],
            epsilon: Some(self.epsilon.clone()),
            lambda: 0.1,
            margin: 4.0,
            weight_decay: 5e-4,
            val_inputs: None,
        }
    }

    pub fn bilevel_state(&self, cfg: &SecondStepConfig) -> BilevelState {
        BilevelState::new(self.labeling.clone(), cfg).expect("bilevel state")
    }
}
