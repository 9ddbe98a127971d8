use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::stages::{run_calibration, select_targets, CalibrationData, LoadedWorld, MethodEval};
use super::{require, FactsSource, Manifest, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Precision, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of calibrated facts; slots scale with it.
    FactCount,
    SlotCount,
    AttachLayer,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::FactCount => "fact_count",
            SweepAxis::SlotCount => "slot_count",
            SweepAxis::AttachLayer => "attach_layer",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "fact_count" | "facts" => Ok(SweepAxis::FactCount),
            "slot_count" | "slots" => Ok(SweepAxis::SlotCount),
            "attach_layer" | "layer" => Ok(SweepAxis::AttachLayer),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub facts_source: FactsSource,
    /// Run points on separate threads; results are identical either way.
    #[serde(default)]
    pub parallel: bool,
}

impl SweepSpec {
    pub fn validate(&self, cfg: &RunConfig) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        for &v in &self.values {
            match self.axis {
                SweepAxis::AttachLayer if v >= cfg.model.n_layers => {
                    return Err(Error::Config(format!(
                        "attach layer {v} out of range for {} layers",
                        cfg.model.n_layers
                    )))
                }
                SweepAxis::FactCount | SweepAxis::SlotCount if v == 0 => {
                    return Err(Error::Config("sweep values must be positive".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Run config for one point. Fact-count points scale the slot count in
    /// proportion to `max_facts`, rounding up.
    pub fn point_config(&self, cfg: &RunConfig, value: usize) -> RunConfig {
        let mut c = cfg.clone();
        match self.axis {
            SweepAxis::FactCount => {
                c.max_facts = value;
                c.adapter.d_c = (value * cfg.adapter.d_c).div_ceil(cfg.max_facts).max(1);
            }
            SweepAxis::SlotCount => c.adapter.d_c = value,
            SweepAxis::AttachLayer => c.adapter.attach_layer = value,
        }
        let mut h = Sha256::new();
        h.update(cfg.seed.to_le_bytes());
        h.update(self.axis.as_str().as_bytes());
        h.update((value as u64).to_le_bytes());
        let seed = u64::from_le_bytes(h.finalize()[..8].try_into().unwrap());
        c.adapter.seed = seed;
        c.calibrate.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub facts: usize,
    pub slots: usize,
    pub layer: usize,
    pub em: f64,
    pub f1: f64,
    pub false_rate: f64,
    pub vanilla_em: f64,
    pub vanilla_false_rate: f64,
    pub ori_ppl: f64,
    pub adv_ppl: f64,
    pub lm_ppl: f64,
    pub best_step: usize,
}

/// One calibrate + evaluate run per value, all from the same base
/// checkpoint. Writes `sweep/<axis>/sweep.{csv,json,svg}`.
pub fn cmd_sweep(config: &RunConfig, spec: &SweepSpec) -> Result<(Manifest, Vec<SweepRow>)> {
    let cfg = config.resolved()?;
    spec.validate(&cfg)?;
    match cfg.model.precision {
        Precision::F32 => sweep_stage::<f32>(&cfg, spec),
        Precision::F64 => sweep_stage::<f64>(&cfg, spec),
    }
}

fn sweep_stage<S: Scalar>(cfg: &RunConfig, spec: &SweepSpec) -> Result<(Manifest, Vec<SweepRow>)> {
    let layout = cfg.layout();
    let dir = layout.stage("sweep").join(spec.axis.as_str());
    let world = LoadedWorld::load(&layout)?;
    require(&layout.base_checkpoint(), "pretrain")?;
    let mut inputs = LoadedWorld::files(&layout);
    inputs.push(layout.base_checkpoint());
    if spec.facts_source == FactsSource::Detected {
        require(&layout.assessment(), "assess")?;
        inputs.push(layout.assessment());
    }
    let stage_cfg = json!({
        "spec": spec.values,
        "axis": spec.axis,
        "facts_source": spec.facts_source,
        "adapter": cfg.adapter,
        "train": cfg.calibrate,
        "max_facts": cfg.max_facts,
    });
    let manifest = Manifest::begin("sweep", cfg.seed, stage_cfg, &layout.root, &inputs)?;
    let (base, _) = Model::<S>::load_base(&layout.base_checkpoint())?;

    let point = |value: usize| -> Result<SweepRow> {
        let c = spec.point_config(cfg, value);
        let targets = select_targets(&layout, &world, spec.facts_source, c.max_facts)?;
        let data = CalibrationData::build(&world, &targets, c.cka.k_neg, c.seed)?;
        let vanilla = MethodEval::run(&base, &world.vocab, &data, &c.cka)?;
        let (model, outcome) = run_calibration(&base, &world.vocab, &data, &c)?;
        let cal = MethodEval::run(&model, &world.vocab, &data, &c.cka)?;
        Ok(SweepRow {
            value,
            facts: targets.len(),
            slots: c.adapter.d_c,
            layer: c.adapter.attach_layer,
            em: cal.results[0].em,
            f1: cal.results[0].f1,
            false_rate: cal.assessment.false_rate,
            vanilla_em: vanilla.results[0].em,
            vanilla_false_rate: vanilla.assessment.false_rate,
            ori_ppl: cal.results[0].perplexity,
            adv_ppl: cal.results[1].perplexity,
            lm_ppl: cal.results[2].perplexity,
            best_step: outcome.best_step,
        })
    };
    let rows: Vec<SweepRow> = if spec.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = spec.values.iter().map(|&v| s.spawn(move || point(v))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep point panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        spec.values.iter().map(|&v| point(v)).collect::<Result<_>>()?
    };

    let mut csv = String::from(
        "run_hash,axis,value,facts,slots,layer,em,f1,false_rate,vanilla_em,vanilla_false_rate,ori_ppl,adv_ppl,lm_ppl,best_step\n",
    );
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            manifest.run_hash,
            spec.axis.as_str(),
            r.value,
            r.facts,
            r.slots,
            r.layer,
            r.em,
            r.f1,
            r.false_rate,
            r.vanilla_em,
            r.vanilla_false_rate,
            r.ori_ppl,
            r.adv_ppl,
            r.lm_ppl,
            r.best_step
        )
        .unwrap();
    }
    std::fs::create_dir_all(&dir)?;
    let outputs: Vec<PathBuf> = ["sweep.csv", "sweep.json", "sweep.svg"].iter().map(|f| dir.join(f)).collect();
    std::fs::write(&outputs[0], csv)?;
    std::fs::write(
        &outputs[1],
        serde_json::to_string_pretty(&json!({"run_hash": manifest.run_hash, "axis": spec.axis, "rows": rows}))? + "\n",
    )?;
    let labels: Vec<String> = rows.iter().map(|r| r.value.to_string()).collect();
    let series = [
        ("EM", rows.iter().map(|r| r.em).collect::<Vec<_>>()),
        ("F1", rows.iter().map(|r| r.f1).collect()),
        ("false rate", rows.iter().map(|r| r.false_rate).collect()),
    ];
    std::fs::write(
        &outputs[2],
        render_svg(&format!("calibration vs {}", spec.axis.as_str()), spec.axis.as_str(), &labels, &series),
    )?;
    let manifest = manifest.finish(&layout.root, &dir, &outputs, serde_json::to_value(&rows)?)?;
    Ok((manifest, rows))
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Line chart with evenly spaced categorical x positions and a fixed [0, 1]
/// y range.
pub fn render_svg(title: &str, x_label: &str, labels: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let (w, h) = (560.0, 360.0);
    let (left, right, top, bottom) = (60.0, 130.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = labels.len().max(1);
    let x = |i: usize| {
        if n == 1 {
            left + pw / 2.0
        } else {
            left + pw * i as f64 / (n - 1) as f64
        }
    };
    let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title)).unwrap();
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        writeln!(s, r##"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="#ddd"/>"##, y(v), left + pw).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, left - 6.0, y(v) + 4.0).unwrap();
    }
    writeln!(s, r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, top + ph, left + pw).unwrap();
    writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + ph).unwrap();
    for (i, label) in labels.iter().enumerate() {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x(i), top + ph + 18.0, escape(label)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label)).unwrap();
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = values.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
        for (i, &v) in values.iter().enumerate() {
            writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x(i), y(v)).unwrap();
        }
        let ly = top + 10.0 + 18.0 * k as f64;
        writeln!(s, r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, left + pw + 15.0, left + pw + 35.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, left + pw + 40.0, ly + 4.0, escape(name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fact_points_scale_slots() {
        let cfg = RunConfig::default();
        let spec = SweepSpec {
            axis: SweepAxis::FactCount,
            values: vec![10, 50, 100, 300, 500],
            facts_source: FactsSource::Detected,
            parallel: false,
        };
        let slots: Vec<usize> = spec.values.iter().map(|&v| spec.point_config(&cfg, v).adapter.d_c).collect();
        assert_eq!(slots, vec![7, 32, 64, 192, 320]);
        assert_eq!(spec.point_config(&cfg, 10).max_facts, 10);
    }

    #[test]
    fn layer_values_checked() {
        let cfg = RunConfig::default();
        let spec = SweepSpec {
            axis: SweepAxis::AttachLayer,
            values: vec![0, 4],
            facts_source: FactsSource::Detected,
            parallel: false,
        };
        assert!(spec.validate(&cfg).is_err());
    }

    #[test]
    fn axis_parses_aliases() {
        assert_eq!("slots".parse::<SweepAxis>().unwrap(), SweepAxis::SlotCount);
        assert_eq!("attach-layer".parse::<SweepAxis>().unwrap(), SweepAxis::AttachLayer);
        assert!("depth".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let labels = vec!["1".to_string(), "2".to_string()];
        let svg = render_svg("t <x>", "x", &labels, &[("a", vec![0.1, 0.9]), ("b", vec![0.5, 0.5])]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("t &lt;x&gt;"));
        assert!(svg.starts_with("<svg"));
    }
}
