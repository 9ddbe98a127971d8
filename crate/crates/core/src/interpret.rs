//! Vocabulary projections of FFN and adapter value vectors, and layer-by-layer
//! traces of the output distribution at the mask position.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, single_mask, Batch, GradMode, Model};
use crate::numerics::{softmax_in_place, Graph, Scalar, Tensor};
use crate::worldgen::Vocab;

pub const DEFAULT_TOP_K: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ValueSource {
    Ffn { layer: usize, index: usize },
    Adapter { slot: usize },
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueProjection {
    pub source: ValueSource,
    /// Full distribution over the vocabulary.
    #[serde(skip)]
    pub distribution: Vec<f64>,
    /// `(token id, probability)`, most probable first.
    pub top: Vec<(usize, f64)>,
}

impl ValueProjection {
    pub fn top_tokens<'a>(&self, vocab: &'a Vocab) -> Result<Vec<(&'a str, f64)>> {
        self.top.iter().map(|&(id, p)| Ok((vocab.token(id)?, p))).collect()
    }
}

fn top_k(dist: &[f64], k: usize) -> Vec<(usize, f64)> {
    crate::model::rank_desc(dist)
        .into_iter()
        .take(k)
        .map(|i| (i, dist[i]))
        .collect()
}

/// `softmax(E v)`: the vocabulary distribution a value vector promotes.
pub fn project_value<S: Scalar>(value: &[S], embed: &Tensor<S>, k: usize) -> Result<ValueProjection> {
    let (vocab, d) = embed.dims2()?;
    if value.len() != d {
        return Err(Error::shape("project_value", &[value.len()], &[vocab, d]));
    }
    let v = Tensor::new([1, d], value.to_vec())?;
    let mut logits = v.matmul_t(embed)?.into_data();
    softmax_in_place(&mut logits);
    let distribution: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    Ok(ValueProjection {
        source: ValueSource::Vector,
        top: top_k(&distribution, k),
        distribution,
    })
}

/// Projects every adapter value row, most confident slot first.
pub fn slot_report<S: Scalar>(model: &Model<S>, k: usize) -> Result<Vec<ValueProjection>> {
    let values = &model
        .state
        .get(names::ADAPTER_V)
        .ok_or_else(|| Error::InvalidArgument("model has no adapter attached".into()))?
        .tensor;
    let embed = &model.state.expect(names::EMBED)?.tensor;
    let mut out = Vec::with_capacity(values.shape()[0]);
    for slot in 0..values.shape()[0] {
        let mut p = project_value(values.row(slot), embed, k)?;
        p.source = ValueSource::Adapter { slot };
        out.push(p);
    }
    sort_by_confidence(&mut out);
    Ok(out)
}

/// Projects the value rows of one base FFN layer, most confident first.
pub fn ffn_value_report<S: Scalar>(model: &Model<S>, layer: usize, k: usize) -> Result<Vec<ValueProjection>> {
    if layer >= model.config.n_layers {
        return Err(Error::LayerIndex {
            index: layer,
            n_layers: model.config.n_layers,
        });
    }
    let values = &model.state.expect(&names::ffn_v(layer))?.tensor;
    let embed = &model.state.expect(names::EMBED)?.tensor;
    let mut out = Vec::with_capacity(values.shape()[0]);
    for index in 0..values.shape()[0] {
        let mut p = project_value(values.row(index), embed, k)?;
        p.source = ValueSource::Ffn { layer, index };
        out.push(p);
    }
    sort_by_confidence(&mut out);
    Ok(out)
}

fn sort_by_confidence(items: &mut [ValueProjection]) {
    items.sort_by(|a, b| {
        let pa = a.top.first().map_or(0.0, |t| t.1);
        let pb = b.top.first().map_or(0.0, |t| t.1);
        pb.total_cmp(&pa)
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer: usize,
    /// True for the extra row that includes the adapter term.
    pub with_adapter: bool,
    pub top: Vec<(String, f64)>,
}

impl TraceRow {
    pub fn label(&self) -> String {
        if self.with_adapter {
            format!("layer {} w/ adapter", self.layer)
        } else {
            format!("layer {}", self.layer)
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.top.iter().any(|(t, _)| t == token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub input: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl LayerTrace {
    /// Row reflecting the model's actual output.
    pub fn final_row(&self) -> &TraceRow {
        self.rows.last().expect("a trace has at least one row")
    }

    /// Aligned plain-text table, one row per traced layer.
    pub fn to_table(&self, columns: usize) -> String {
        let label_width = self.rows.iter().map(|r| r.label().len()).max().unwrap_or(0);
        let mut out = String::new();
        writeln!(out, "input: {}", crate::worldgen::detokenize(&self.input)).unwrap();
        for row in &self.rows {
            let cells: Vec<String> = row
                .top
                .iter()
                .take(columns)
                .map(|(t, p)| format!("{t} ({p:.3})"))
                .collect();
            writeln!(out, "{:<label_width$} | {}", row.label(), cells.join(", ")).unwrap();
        }
        out
    }
}

/// Reads the residual stream at the mask after every layer through the final
/// norm and the output projection. With an adapter, the attach layer gets two
/// rows: without and then with the adapter term.
pub fn trace_output_distribution<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    input: &[String],
    k: usize,
) -> Result<LayerTrace> {
    let ids = vocab.encode(input)?;
    let mask = single_mask(&ids, vocab.mask_id())?;
    let mut g = Graph::new();
    let batch = Batch::from_sequences([ids.as_slice()]);
    let fp = model.record(&mut g, &batch, GradMode::Inference, true)?;
    let gain = g.leaf(model.state.expect(names::FINAL_NORM)?.tensor.clone(), false);
    let attach = model.adapter.as_ref().map(|a| a.attach_layer);

    let mut reads = Vec::new();
    for (l, &out) in fp.layer_outputs.iter().enumerate() {
        if Some(l) == attach {
            let pre = fp.pre_adapter.expect("trace records the pre-adapter stream");
            reads.push((l, false, pre));
            reads.push((l, true, out));
        } else {
            reads.push((l, false, out));
        }
    }
    let mut rows = Vec::with_capacity(reads.len());
    for (layer, with_adapter, var) in reads {
        let normed = g.rms_norm(var, gain)?;
        let picked = g.gather(normed, &[mask])?;
        let logits = g.matmul_t(picked, fp.embed)?;
        let mut probs = g.value(logits).row(0).to_vec();
        softmax_in_place(&mut probs);
        let top = crate::model::rank_desc(&probs)
            .into_iter()
            .take(k)
            .map(|i| Ok((vocab.token(i)?.to_string(), probs[i].to_f64().unwrap_or(f64::NAN))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(TraceRow {
            layer,
            with_adapter,
            top,
        });
    }
    Ok(LayerTrace {
        input: input.to_vec(),
        rows,
    })
}

/// Text report of adapter slots, `columns` tokens per slot.
pub fn slot_table(report: &[ValueProjection], vocab: &Vocab, columns: usize) -> Result<String> {
    let mut out = String::new();
    for p in report {
        let label = match p.source {
            ValueSource::Adapter { slot } => format!("slot {slot}"),
            ValueSource::Ffn { layer, index } => format!("layer {layer} value {index}"),
            ValueSource::Vector => "vector".to_string(),
        };
        let cells: Vec<String> = p
            .top_tokens(vocab)?
            .into_iter()
            .take(columns)
            .map(|(t, q)| format!("{t} ({q:.3})"))
            .collect();
        writeln!(out, "{label:<20} | {}", cells.join(", ")).unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calinet::{attach, AdapterConfig};
    use crate::model::ModelConfig;
    use crate::numerics::Precision;
    use crate::worldgen::{generate_world, WorldDefinition, WorldSpec, MASK};

    #[test]
    fn zero_vector_projects_uniformly() {
        let e = Tensor::<f64>::from_f64([4, 2], &[1.0, 2.0, -1.0, 0.5, 3.0, 3.0, 0.0, 1.0]).unwrap();
        let p = project_value(&[0.0, 0.0], &e, 30).unwrap();
        assert!(p.distribution.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(p.top.len(), 4);
        assert!(project_value(&[0.0], &e, 3).is_err());
    }

    #[test]
    fn dominant_row_wins() {
        let v = [0.6, 0.8];
        let c = 50.0;
        let e = Tensor::<f64>::from_f64([3, 2], &[c * 0.6, c * 0.8, 0.8, -0.6, -0.8, 0.6]).unwrap();
        let p = project_value(&v, &e, 2).unwrap();
        assert_eq!(p.top[0].0, 0);
        assert!(p.top[0].1 > 1.0 - 1e-9);
        assert!((p.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.top[0].1 >= p.top[1].1);
    }

    fn setup() -> (Model<f64>, Vocab, Vec<String>) {
        let spec = WorldSpec {
            entities_per_type: 5,
            relations: 2,
            facts: 5,
            ..WorldSpec::default()
        };
        let w = generate_world(&WorldDefinition::builtin(), &spec).unwrap();
        let m = Model::new(ModelConfig {
            d: 8,
            d_m: 16,
            n_layers: 3,
            n_heads: 2,
            vocab_size: w.vocab.len(),
            max_seq_len: 16,
            precision: Precision::F64,
            seed: 4,
        })
        .unwrap();
        let input: Vec<String> = ["per_trobrol", "was", "born", "in", MASK, "."].iter().map(|s| s.to_string()).collect();
        (m, w.vocab, input)
    }

    #[test]
    fn final_row_matches_prediction() {
        let (m, vocab, input) = setup();
        let trace = trace_output_distribution(&m, &vocab, &input, 10).unwrap();
        assert_eq!(trace.rows.len(), 3);
        let pred = m.predict_masked(&vocab.encode(&input).unwrap(), 0).unwrap();
        for ((id, p), (tok, q)) in pred.top(10).into_iter().zip(&trace.final_row().top) {
            assert_eq!(vocab.token(id).unwrap(), tok);
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_adapter_trace_matches_vanilla() {
        let (mut m, vocab, input) = setup();
        let vanilla = trace_output_distribution(&m, &vocab, &input, 10).unwrap();
        attach(&mut m, AdapterConfig::new(4, 1)).unwrap();
        let with = trace_output_distribution(&m, &vocab, &input, 10).unwrap();
        assert_eq!(with.rows.len(), 4);
        assert!(with.rows[2].with_adapter);
        assert_eq!(with.rows[1].top, vanilla.rows[1].top);
        assert_eq!(with.rows[2].top, vanilla.rows[1].top);
        assert_eq!(with.rows[3].top, vanilla.rows[2].top);
        assert!(with.to_table(3).contains("layer 1 w/ adapter"));
        let slots = slot_report(&m, 5).unwrap();
        assert_eq!(slots.len(), 4);
        assert!(slot_table(&slots, &vocab, 3).unwrap().contains("slot"));
    }

    #[test]
    fn ffn_report_sorted_by_confidence() {
        let (m, _, _) = setup();
        let rep = ffn_value_report(&m, 0, 5).unwrap();
        assert_eq!(rep.len(), 16);
        for w in rep.windows(2) {
            assert!(w[0].top[0].1 >= w[1].top[0].1);
        }
        assert!(ffn_value_report(&m, 3, 5).is_err());
    }
}
