use std::io::Write;

use super::StepOutcome;
use crate::Result;

/// Writes per-step traces as `step,reward,active_*,util_*,thr_*`.
pub struct TraceWriter<W: Write> {
    out: W,
    n_cells: usize,
    step: usize,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, n_cells: usize) -> Result<Self> {
        let mut header = String::from("step,reward");
        for prefix in ["active", "util", "thr"] {
            for c in 0..n_cells {
                header.push_str(&format!(",{prefix}_{c}"));
            }
        }
        writeln!(out, "{header}").map_err(|e| crate::Error::io("<trace>", e))?;
        Ok(TraceWriter { out, n_cells, step: 0 })
    }

    pub fn record(&mut self, outcome: &StepOutcome) -> Result<()> {
        debug_assert_eq!(outcome.state.n_cells(), self.n_cells);
        let mut line = format!("{},{}", self.step, outcome.reward);
        for v in outcome.state.to_vec() {
            line.push_str(&format!(",{v}"));
        }
        writeln!(self.out, "{line}").map_err(|e| crate::Error::io("<trace>", e))?;
        self.step += 1;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
