//! Signal traces and their CSV / VCD renderings.

use std::io;

use thiserror::Error;
use vcd::{TimescaleUnit, Value};

use crate::controller::DriveState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceSample {
    pub t_ms: u64,
    pub state: DriveState,
    pub run: bool,
    pub eject: bool,
}

impl TraceSample {
    pub fn new(t_ms: u64, state: DriveState) -> Self {
        let s = state.signals();
        TraceSample {
            t_ms,
            state,
            run: s.run,
            eject: s.eject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// A disc episode: the terminal state reached between one insertion and the
/// next return to `Idle`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Episode {
    pub inserted_at: u64,
    pub outcome: Option<DriveState>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalTrace {
    samples: Vec<TraceSample>,
}

pub const CSV_HEADER: &str = "t_ms,state,run,eject";

impl SignalTrace {
    pub(crate) fn from_samples(samples: Vec<TraceSample>) -> Self {
        SignalTrace { samples }
    }

    pub fn samples(&self) -> &[TraceSample] {
        &self.samples
    }

    /// Groups samples into insertion episodes. An insertion is any
    /// transition out of `Idle`.
    pub fn episodes(&self) -> Vec<Episode> {
        let mut out: Vec<Episode> = Vec::new();
        let mut prev = DriveState::Idle;
        for s in &self.samples {
            if prev == DriveState::Idle && s.state != DriveState::Idle {
                out.push(Episode {
                    inserted_at: s.t_ms,
                    outcome: None,
                });
            }
            if matches!(s.state, DriveState::Running | DriveState::Ejecting) {
                if let Some(e) = out.last_mut() {
                    e.outcome = Some(s.state);
                }
            }
            prev = s.state;
        }
        out
    }

    pub fn count_outcome(&self, state: DriveState) -> usize {
        self.episodes()
            .iter()
            .filter(|e| e.outcome == Some(state))
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.t_ms, s.state, s.run as u8, s.eject as u8
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TraceError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, CSV_HEADER)) => {}
            _ => {
                return Err(TraceError::Parse {
                    line: 1,
                    reason: format!("expected header {CSV_HEADER:?}"),
                })
            }
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let err = |reason: &str| TraceError::Parse {
                line: i + 1,
                reason: reason.to_owned(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            let [t, state, run, eject] = fields[..] else {
                return Err(err("expected 4 fields"));
            };
            let level = |f: &str| match f {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(err("signal level must be 0 or 1")),
            };
            samples.push(TraceSample {
                t_ms: t.parse().map_err(|_| err("bad t_ms"))?,
                state: DriveState::from_name(state).ok_or_else(|| err("unknown state"))?,
                run: level(run)?,
                eject: level(eject)?,
            });
        }
        Ok(SignalTrace { samples })
    }

    /// Value change dump with 1 ms resolution: 1-bit `run` and `eject`
    /// wires and a 3-bit `state` vector (encoding listed in the header
    /// comment). No `$date` section, so output is reproducible.
    pub fn write_vcd<W: io::Write>(&self, w: W) -> io::Result<()> {
        let mut v = vcd::Writer::new(w);
        v.version("tagdrive")?;
        let legend: Vec<String> = DriveState::ALL
            .iter()
            .map(|s| format!("{}={}", s.encoding(), s.name()))
            .collect();
        v.comment(&format!("state encoding: {}", legend.join(" ")))?;
        v.timescale(1, TimescaleUnit::MS)?;
        v.add_module("drive")?;
        let run = v.add_wire(1, "run")?;
        let eject = v.add_wire(1, "eject")?;
        let state = v.add_wire(3, "state")?;
        v.upscope()?;
        v.enddefinitions()?;

        let bit = |b: bool| if b { Value::V1 } else { Value::V0 };
        let vector = |s: DriveState| (0..3).rev().map(move |k| bit(s.encoding() >> k & 1 == 1));
        let mut prev: Option<TraceSample> = None;
        for s in &self.samples {
            v.timestamp(s.t_ms)?;
            if prev.is_none_or(|p| p.run != s.run) {
                v.change_scalar(run, bit(s.run))?;
            }
            if prev.is_none_or(|p| p.eject != s.eject) {
                v.change_scalar(eject, bit(s.eject))?;
            }
            if prev.is_none_or(|p| p.state != s.state) {
                v.change_vector(state, vector(s.state))?;
            }
            prev = Some(*s);
        }
        v.flush()
    }

    pub fn to_vcd(&self) -> String {
        let mut buf = Vec::new();
        self.write_vcd(&mut buf)
            .expect("writing to a Vec does not fail");
        String::from_utf8(buf).expect("VCD output is ASCII")
    }
}

/// Structural problems found by [`check_trace`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceViolation {
    BadStart,
    NonIncreasingTime { index: usize },
    RunAndEject { index: usize },
    SignalsDisagreeWithState { index: usize },
    RunningWithoutAuthentication { index: usize },
}

/// Checks the trace invariants: starts Idle at t = 0 with both signals low,
/// strictly increasing time, never run and eject together, signals match
/// the state, and every `Running` sample directly follows `Authenticating`.
pub fn check_trace(trace: &SignalTrace) -> Vec<TraceViolation> {
    let s = trace.samples();
    let mut out = Vec::new();
    match s.first() {
        Some(f) if f.t_ms == 0 && f.state == DriveState::Idle && !f.run && !f.eject => {}
        _ => out.push(TraceViolation::BadStart),
    }
    for (i, x) in s.iter().enumerate() {
        if i > 0 && x.t_ms <= s[i - 1].t_ms {
            out.push(TraceViolation::NonIncreasingTime { index: i });
        }
        if x.run && x.eject {
            out.push(TraceViolation::RunAndEject { index: i });
        }
        let want = x.state.signals();
        if want.run != x.run || want.eject != x.eject {
            out.push(TraceViolation::SignalsDisagreeWithState { index: i });
        }
        if x.state == DriveState::Running
            && (i == 0 || s[i - 1].state != DriveState::Authenticating)
        {
            out.push(TraceViolation::RunningWithoutAuthentication { index: i });
        }
    }
    out
}
