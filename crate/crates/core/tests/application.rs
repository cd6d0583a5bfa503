use std::time::Instant;

use histboost::boostcore::Prepared;
use histboost::cli::{appraisal_factors, application_config, ModelConfig, TemplateArgs, APPRAISALS, APPRAISAL_PRODUCT};
use histboost::simgen::{self, Scenario, SimParams};

fn template(delta: f64) -> TemplateArgs {
    TemplateArgs {
        delta,
        response: simgen::RESPONSE.into(),
        covariate: simgen::COVARIATE.into(),
        condition: simgen::CONDITION.into(),
        subject: simgen::SUBJECT.into(),
        out: "unused.toml".into(),
    }
}

#[test]
fn appraisal_factors_encode_the_conditions() {
    let p = SimParams { n: 16, d: 12, eta: 8, n_subject: 2, ..Default::default() };
    let sim = simgen::simulate(Scenario::FactorHistorical, &p).unwrap();
    let cond = sim.dataset.categorical(simgen::CONDITION).unwrap();
    let f = appraisal_factors(cond).unwrap();
    assert_eq!(f.len(), 4);
    for (i, &c) in cond.codes.iter().enumerate() {
        let bits: Vec<usize> = f[..3].iter().map(|z| z.codes[i]).collect();
        assert_eq!(bits[0] * 4 + bits[1] * 2 + bits[2], c);
        let sign: i32 = bits.iter().map(|b| if *b == 1 { 1 } else { -1 }).product();
        assert_eq!(f[3].labels[f[3].codes[i]], if sign > 0 { "plus" } else { "minus" });
    }
    let names: Vec<&str> = f.iter().map(|z| z.name.as_str()).collect();
    assert_eq!(names, [APPRAISALS[0], APPRAISALS[1], APPRAISALS[2], APPRAISAL_PRODUCT]);
}

#[test]
fn application_config_round_trips() {
    let config = application_config(&template(12.0));
    config.validate().unwrap();
    assert_eq!(config.effects.len(), 13);
    let text = config.to_toml().unwrap();
    assert_eq!(ModelConfig::from_toml(&text).unwrap(), config);
}

/// 23 subjects × 8 conditions × 384 time points, one curve per cell.
#[test]
fn application_model_fits_on_shaped_data() {
    let start = Instant::now();
    let p = SimParams { n: 184, d: 384, eta: 8, n_subject: 23, seed: 3, ..Default::default() };
    let mut sim = simgen::simulate(Scenario::Full, &p).unwrap();
    let extra = appraisal_factors(sim.dataset.categorical(simgen::CONDITION).unwrap()).unwrap();
    sim.dataset.categorical.extend(extra);
    assert_eq!(sim.dataset.n_obs(), 184 * 384);
    let mut config = application_config(&template(12.0 / 1500.0));
    config.boost.mstop = 30;
    config.boost.folds = 0;
    config.check_dataset(&sim.dataset).unwrap();
    let cfg = config.boost_config(None).unwrap();
    let model = Prepared::new(&sim.dataset, &config.effects).unwrap().fit(&cfg).unwrap();
    assert_eq!(model.learners.len(), 13);
    assert!(model.learners.iter().all(|l| l.df == cfg.df));
    assert!(model.risk.last().unwrap() < &model.risk[0]);
    println!("application fit in {:.1}s", start.elapsed().as_secs_f64());
}
