//! Shared fixtures for the benchmarks.

use tiltscore::moments::ProviderSettings;
use tiltscore::simlab::{Design, DesignId};
use tiltscore::{HFamily, ModelSpec, MomentProvider, ProviderKind, Sample};

pub struct Fixture {
    pub design: Design,
    pub sample: Sample,
    pub spec: ModelSpec,
    pub provider: MomentProvider,
}

/// A generated sample of size `n` from `id` with a fitted provider.
pub fn fixture(id: DesignId, n: usize, kind: ProviderKind) -> Fixture {
    let design = Design::new(id);
    let sample = design.generate(n, 17, 0).expect("valid design");
    let spec = ModelSpec::new(HFamily::Linear, design.g_star.clone());
    let (inner, outer) = design.beta_kernels;
    let settings = match kind {
        ProviderKind::Oracle => ProviderSettings::oracle(design.law.clone()),
        ProviderKind::Parametric => ProviderSettings::parametric(design.basis.clone()),
        ProviderKind::Nonparametric => ProviderSettings::nonparametric(inner, outer),
    };
    let provider = settings.fit(&sample, &spec.h).expect("provider fits");
    Fixture { design, sample, spec, provider }
}
