//! Named ablation presets. Each variant is a small edit of the base config.

use crate::config::ExperimentConfig;

pub struct Variant {
    pub label: String,
    pub apply: Box<dyn Fn(&mut ExperimentConfig)>,
}

fn variant(label: impl Into<String>, apply: impl Fn(&mut ExperimentConfig) + 'static) -> Variant {
    Variant {
        label: label.into(),
        apply: Box::new(apply),
    }
}

pub const PRESETS: [&str; 4] = ["table3_noise_schedules", "table4_rgp", "fig_pn_prior_dims", "fig_pe_encodings"];

pub fn preset(name: &str) -> Option<Vec<Variant>> {
    let v = match name {
        "table3_noise_schedules" => [("cn", "ca", "cd"), ("cn", "ca", "sd"), ("cn", "sa", "sd"), ("sn", "sa", "cd"), ("sn", "sa", "sd")]
            .into_iter()
            .map(|(i, a, d)| {
                variant(format!("{i}_{a}_{d}"), move |c| {
                    c.schedule.intensity = i.into();
                    c.schedule.adding = a.into();
                    c.schedule.denoising = d.into();
                })
            })
            .collect(),
        "table4_rgp" => ["fine_greedy", "coarse_greedy", "uniform"]
            .into_iter()
            .map(|s| variant(s, move |c| c.plan.strategy = s.into()))
            .collect(),
        "fig_pn_prior_dims" => [0usize, 8, 16, 32, 64]
            .into_iter()
            .map(|d| {
                let label = if d == 0 { "off".to_string() } else { format!("d{d}") };
                variant(label, move |c| c.model.fusion_dim = d)
            })
            .collect(),
        "fig_pe_encodings" => [(true, true), (true, false), (false, true), (false, false)]
            .into_iter()
            .map(|(t, s)| {
                let label = match (t, s) {
                    (true, true) => "tpe_spe",
                    (true, false) => "tpe_only",
                    (false, true) => "spe_only",
                    (false, false) => "none",
                };
                variant(label, move |c| {
                    c.model.use_tpe = t;
                    c.model.use_spe = s;
                })
            })
            .collect(),
        _ => return None,
    };
    Some(v)
}
