use tiltscore::simlab::DesignId;
use tiltscore::{ProviderKind, ScoreContext};
use tiltscore_bench::fixture;

#[test]
fn fixtures_evaluate_for_every_provider() {
    for kind in [ProviderKind::Oracle, ProviderKind::Parametric, ProviderKind::Nonparametric] {
        let f = fixture(DesignId::A, 120, kind);
        assert_eq!(f.sample.len(), 120);
        let ctx = ScoreContext::new(&f.spec, &f.provider, &f.sample).unwrap();
        let s = ctx.evaluate(&[-0.2]).unwrap().sum();
        assert!(s[0].is_finite(), "{kind}: {s:?}");
    }
}
