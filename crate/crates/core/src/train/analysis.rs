use std::collections::BTreeMap;
use std::io::Write;
use std::rc::Rc;

use crate::net::SceneInput;
use crate::tensor::{GradBuffer, Session};

use super::model::DoremiModel;
use super::trainer::Evaluation;
use super::TrainError;

/// Moves domain `domain`'s embedding in every mixture layer so that the gates
/// favor `expert` on that domain's tokens. Only those embedding rows change.
/// Returns the mean log-probability of `expert` before each step.
pub fn plant_domain_embedding(
    model: &mut DoremiModel,
    scenes: &[&SceneInput],
    domain: u32,
    expert: usize,
    steps: usize,
    step_size: f64,
) -> Result<Vec<f64>, TrainError> {
    let k = model.layers.first().map_or(0, |l| l.bank.len());
    if expert >= k {
        return Err(TrainError::Config(format!("expert {expert} outside bank of {k}")));
    }
    let rows: Vec<(crate::tensor::ParamId, usize)> = model
        .layers
        .iter()
        .map(|l| {
            let t = l.domains.as_ref().ok_or_else(|| TrainError::Config("layer has no domain embedding".into()))?;
            let r = t.row_of(domain).ok_or(crate::moe::MoeError::UnknownDomain(domain))?;
            Ok((t.table, r))
        })
        .collect::<Result<_, TrainError>>()?;
    let own: Vec<&SceneInput> = scenes.iter().copied().filter(|s| s.domain_id == domain).collect();
    if own.is_empty() {
        return Err(TrainError::MissingDomain(domain));
    }
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut buf = GradBuffer::new(&model.store);
        let mut objective = 0.0;
        for input in &own {
            let mut s = Session::new(&model.store);
            let out = model.forward(&mut s, input, model.domain_key(domain))?;
            let mut total = None;
            for &g in &out.gate_logits {
                let n = s.graph.value(g).rows();
                let lp = s.graph.log_softmax_last(g)?;
                let all: Rc<[usize]> = (0..n).collect();
                let col = s.graph.select_entries(lp, all, expert)?;
                let m = s.graph.mean(col)?;
                total = Some(match total {
                    Some(t) => s.graph.add(t, m)?,
                    None => m,
                });
            }
            let total = total.ok_or_else(|| TrainError::Config("model has no mixture layers".into()))?;
            let neg = s.graph.scale(total, -1.0 / out.gate_logits.len() as f64)?;
            objective -= s.graph.value(neg).data()[0];
            let grads = s.graph.backward(neg)?;
            s.accumulate(&grads, &mut buf);
        }
        history.push(objective / own.len() as f64);
        for &(table, row) in &rows {
            let Some(g) = buf.get(table) else { continue };
            let d = model.store.get(table).cols();
            let gr = g[row * d..(row + 1) * d].to_vec();
            let norm = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let t = model.store.get_mut(table);
            for (v, gv) in t.row_mut(row).iter_mut().zip(&gr) {
                *v -= step_size * gv / norm;
            }
        }
    }
    Ok(history)
}

/// Writes per-layer, per-domain utilization as CSV rows
/// `layer_stage,layer_block,domain_id,expert_0..expert_{K-1}`.
pub fn write_utilization_csv<W: Write>(w: W, eval: &Evaluation, experts: usize) -> Result<(), TrainError> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| TrainError::Metric(e.to_string());
    let mut header = vec!["stage".to_string(), "block".into(), "domain_id".into()];
    header.extend((0..experts).map(|j| format!("expert_{j}")));
    out.write_record(&header).map_err(err)?;
    for (at, hist) in eval.layers.iter().zip(eval.utilization(experts)?) {
        for (domain, h) in hist {
            let mut rec = vec![at.stage.to_string(), at.block.to_string(), domain.to_string()];
            rec.extend(h.iter().map(|v| format!("{v:.9}")));
            out.write_record(&rec).map_err(err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the output of [`write_utilization_csv`] back into
/// `(stage, block) -> domain -> histogram`.
pub fn read_utilization_csv(text: &str) -> Result<BTreeMap<(usize, usize), BTreeMap<u32, Vec<f64>>>, TrainError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let bad = |m: String| TrainError::Metric(m);
    let mut out: BTreeMap<(usize, usize), BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64, TrainError> {
            rec.get(i)
                .ok_or_else(|| bad("short row".into()))?
                .parse::<f64>()
                .map_err(|e| bad(e.to_string()))
        };
        let key = (num(0)? as usize, num(1)? as usize);
        let domain = num(2)? as u32;
        let h = (3..rec.len()).map(num).collect::<Result<Vec<_>, _>>()?;
        out.entry(key).or_default().insert(domain, h);
    }
    Ok(out)
}
