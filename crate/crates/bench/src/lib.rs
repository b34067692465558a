//! Shared fixtures for the pipeline benchmarks.

use robmix::dataset::ExperimentDataset;
use robmix::jmmd::{fit_joint, JointFit};
use robmix::terms::presets;
use robmix::JointModelSpec;

pub fn corpus() -> ExperimentDataset {
    ExperimentDataset::bread_corpus()
}

pub fn joint_spec() -> JointModelSpec {
    JointModelSpec::gaussian(presets::mean_model_18(), presets::dispersion_model_16())
}

pub fn joint_fit(data: &ExperimentDataset) -> JointFit {
    fit_joint(&joint_spec(), data).expect("corpus joint fit converges")
}
