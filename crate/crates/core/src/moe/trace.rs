use std::io::{Read, Write};

use super::routing::RoutingDecision;
use super::MoeError;

const HEADER: [&str; 5] = ["token", "domain_id", "entropy", "k", "active"];

/// One routed token in a per-layer trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub token: usize,
    pub domain_id: u32,
    pub entropy: f64,
    pub k: usize,
    pub active: Vec<usize>,
}

impl TraceRow {
    pub fn from_decision(decision: &RoutingDecision, domain_id: u32) -> Vec<TraceRow> {
        (0..decision.n_tokens())
            .map(|i| TraceRow {
                token: i,
                domain_id,
                entropy: decision.entropy[i],
                k: decision.k[i],
                active: decision.active[i].clone(),
            })
            .collect()
    }
}

/// CSV with the active set as `;`-separated expert indices.
pub fn write_traces<W: Write>(w: W, rows: &[TraceRow]) -> Result<(), MoeError> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| MoeError::Trace(e.to_string());
    out.write_record(HEADER).map_err(err)?;
    for r in rows {
        let active = r.active.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        out.write_record([
            r.token.to_string(),
            r.domain_id.to_string(),
            format!("{:.6}", r.entropy),
            r.k.to_string(),
            active,
        ])
        .map_err(err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_traces<R: Read>(r: R) -> Result<Vec<TraceRow>, MoeError> {
    let mut rd = csv::Reader::from_reader(r);
    let bad = |m: String| MoeError::Trace(m);
    let headers = rd.headers().map_err(|e| bad(e.to_string()))?;
    if headers.iter().ne(HEADER) {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad(format!("missing column {}", HEADER[i])));
        let parse_err = |e: &dyn std::fmt::Display| bad(e.to_string());
        let active = match field(4)? {
            "" => Vec::new(),
            s => s
                .split(';')
                .map(|v| v.parse::<usize>().map_err(|e| parse_err(&e)))
                .collect::<Result<_, _>>()?,
        };
        rows.push(TraceRow {
            token: field(0)?.parse().map_err(|e| parse_err(&e))?,
            domain_id: field(1)?.parse().map_err(|e| parse_err(&e))?,
            entropy: field(2)?.parse().map_err(|e| parse_err(&e))?,
            k: field(3)?.parse().map_err(|e| parse_err(&e))?,
            active,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rows = vec![
            TraceRow { token: 0, domain_id: 2, entropy: 0.5, k: 2, active: vec![3, 1] },
            TraceRow { token: 1, domain_id: 2, entropy: 2.079442, k: 8, active: (0..8).collect() },
        ];
        let mut buf = Vec::new();
        write_traces(&mut buf, &rows).unwrap();
        assert_eq!(read_traces(buf.as_slice()).unwrap(), rows);
    }
}
