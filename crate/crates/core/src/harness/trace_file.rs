//! JSONL trace files and flat CSV views of them.
//!
//! Line 1 is a [`TraceHeader`] holding the run's manifest. Each following
//! line is one externally tagged [`TraceLine`]: `{"zoom": snapshot}`,
//! `{"main": snapshot}`, and a closing `{"end": {...}}` with the counts.
//! A file without the closing line is reported as truncated.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{BetaStats, ProbeSnapshot, RunContext, Trace};

use super::config::RunConfig;

pub const TRACE_FORMAT: &str = "signlab-trace";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub manifest: RunConfig,
    pub beta: BetaStats,
    pub context: RunContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoom_context: Option<RunContext>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEnd {
    pub zoom: usize,
    pub main: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLine {
    Zoom(ProbeSnapshot),
    Main(ProbeSnapshot),
    End(TraceEnd),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub main: Trace,
    pub zoom: Option<Trace>,
}

impl TraceFile {
    /// The main trace with the zoom segment (if any) spliced in front.
    pub fn merged(&self) -> Result<Trace> {
        match &self.zoom {
            Some(z) => crate::theory::merge_zoom(z, &self.main),
            None => Ok(self.main.clone()),
        }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        let zoom = self.zoom.as_ref().map_or(&[][..], |z| &z.snapshots[..]);
        for s in zoom {
            serde_json::to_writer(&mut out, &TraceLine::Zoom(s.clone()))?;
            out.write_all(b"\n")?;
        }
        for s in &self.main.snapshots {
            serde_json::to_writer(&mut out, &TraceLine::Main(s.clone()))?;
            out.write_all(b"\n")?;
        }
        let end = TraceEnd { zoom: zoom.len(), main: self.main.snapshots.len() };
        serde_json::to_writer(&mut out, &TraceLine::End(end))?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header: TraceHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Inconclusive("empty trace file".into())),
        };
        if header.format != TRACE_FORMAT || header.version != 1 {
            return Err(Error::Parse(format!("unsupported trace format {:?} v{}", header.format, header.version)));
        }
        let (mut zoom, mut main) = (Vec::new(), Vec::new());
        let mut end = None;
        for (k, line) in lines.enumerate() {
            let line = line?;
            if end.is_some() {
                return Err(Error::Parse(format!("line {}: content after the end marker", k + 2)));
            }
            let parsed: TraceLine = serde_json::from_str(&line)
                .map_err(|e| Error::Inconclusive(format!("truncated or corrupt trace at line {}: {e}", k + 2)))?;
            match parsed {
                TraceLine::Zoom(s) => zoom.push(s),
                TraceLine::Main(s) => main.push(s),
                TraceLine::End(e) => end = Some(e),
            }
        }
        let Some(end) = end else {
            return Err(Error::Inconclusive(format!("truncated trace: no end marker after {} snapshots", zoom.len() + main.len())));
        };
        if end.zoom != zoom.len() || end.main != main.len() {
            return Err(Error::Inconclusive("snapshot counts disagree with the end marker".into()));
        }
        let zoom = match (&header.zoom_context, zoom.is_empty()) {
            (Some(ctx), _) => Some(Trace { context: ctx.clone(), snapshots: zoom }),
            (None, true) => None,
            (None, false) => return Err(Error::Parse("zoom snapshots without a zoom context".into())),
        };
        let main = Trace { context: header.context.clone(), snapshots: main };
        Ok(Self { header, main, zoom })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn push_row(out: &mut String, t: f64, quantity: &str, index: &str, value: f64) {
    out.push_str(&format!("{t},{quantity},{index},{value:e}\n"));
}

/// Long-format CSV `t,quantity,index,value`. Vector indices are `k` or `i`,
/// matrix indices `k:i`.
pub fn snapshot_csv(trace: &Trace) -> String {
    let mut out = String::from("t,quantity,index,value\n");
    for s in &trace.snapshots {
        let t = s.t;
        for (k, v) in s.q_mu.iter().enumerate() {
            push_row(&mut out, t, "q_mu", &k.to_string(), *v);
        }
        for (k, v) in s.k_mu.iter().enumerate() {
            push_row(&mut out, t, "k_mu", &k.to_string(), *v);
        }
        for (name, m) in [("q_xi", &s.q_xi), ("k_xi", &s.k_xi)] {
            for (k, row) in m.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    push_row(&mut out, t, name, &format!("{k}:{i}"), *v);
                }
            }
        }
        push_row(&mut out, t, "v_mu", "", s.v_mu);
        for (name, xs) in [("v_xi", &s.v_xi), ("s11", &s.s11), ("s21", &s.s21), ("loss_deriv", &s.loss_deriv)] {
            for (i, v) in xs.iter().enumerate() {
                push_row(&mut out, t, name, &i.to_string(), *v);
            }
        }
        push_row(&mut out, t, "train_loss", "", s.train_loss);
    }
    out
}

/// CSV `t,train_loss,test_loss`; the test column is empty where no test
/// evaluation happened.
pub fn loss_csv(trace: &Trace) -> String {
    let mut out = String::from("t,train_loss,test_loss\n");
    for s in &trace.snapshots {
        let test = s.test_loss.map(|x| format!("{x:e}")).unwrap_or_default();
        out.push_str(&format!("{},{:e},{test}\n", s.t, s.train_loss));
    }
    out
}
