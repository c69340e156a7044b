//! Drive controller state machine and the insertion-schedule simulator.
//!
//! ```text
//! Idle --insert--> SpinningUp --spun up--> ReadingTag --read ok--> Authenticating
//!                                              |  ^                  |        |
//!                                 read failed  |  | retry      match |        | no match
//!                                 (exhausted)  v  |                  v        v
//!                                           Ejecting <---------- Running   Ejecting
//! any state --remove--> Idle
//! ```
//!
//! `run` is high only in `Running`, `eject` only in `Ejecting`; both are
//! levels held until the disc is removed.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{open_content, ContentError};
use crate::model::{CodeDatabase, Disc, DriveConfig, ModelError, TagCode, VisibleSerial};
use crate::rfid::{read_tag, ReadChannel, ReadResult};
use crate::trace::{SignalTrace, TraceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriveState {
    Idle,
    SpinningUp,
    ReadingTag,
    Authenticating,
    Running,
    Ejecting,
}

impl DriveState {
    pub const ALL: [DriveState; 6] = [
        DriveState::Idle,
        DriveState::SpinningUp,
        DriveState::ReadingTag,
        DriveState::Authenticating,
        DriveState::Running,
        DriveState::Ejecting,
    ];

    pub fn signals(self) -> OutputSignals {
        OutputSignals {
            run: self == DriveState::Running,
            eject: self == DriveState::Ejecting,
        }
    }

    /// Numeric encoding used for the VCD `state` vector.
    pub fn encoding(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            DriveState::Idle => "Idle",
            DriveState::SpinningUp => "SpinningUp",
            DriveState::ReadingTag => "ReadingTag",
            DriveState::Authenticating => "Authenticating",
            DriveState::Running => "Running",
            DriveState::Ejecting => "Ejecting",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for DriveState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OutputSignals {
    pub run: bool,
    pub eject: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DriveEvent {
    InsertDisc(Box<Disc>),
    TagRead(ReadResult),
    AuthDecision(bool),
    RemoveDisc,
    /// Milliseconds spent in the current state so far.
    Tick(u64),
}

impl DriveEvent {
    fn name(&self) -> &'static str {
        match self {
            DriveEvent::InsertDisc(_) => "InsertDisc",
            DriveEvent::TagRead(_) => "TagRead",
            DriveEvent::AuthDecision(_) => "AuthDecision",
            DriveEvent::RemoveDisc => "RemoveDisc",
            DriveEvent::Tick(_) => "Tick",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControllerError {
    #[error("event {event} is not legal in state {state}")]
    IllegalTransition {
        state: DriveState,
        event: &'static str,
    },
    #[error("malformed scenario: {0}")]
    ScenarioMalformed(String),
    #[error("content reads are only served while Running (state is {0})")]
    NotRunning(DriveState),
    #[error("disc carries no content image")]
    NoContent,
    #[error(transparent)]
    Content(#[from] ContentError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Pure transition function.
///
/// `reads_done` counts the tag reads of the current insertion including the
/// one carried by a `TagRead` event; a failed read is retried while
/// `reads_done <= cfg.read_retries`.
pub fn step(
    state: DriveState,
    event: &DriveEvent,
    cfg: &DriveConfig,
    reads_done: u32,
) -> Result<(DriveState, OutputSignals), ControllerError> {
    use DriveState::*;
    let next = match (state, event) {
        (_, DriveEvent::RemoveDisc) => Idle,
        (Idle, DriveEvent::InsertDisc(_)) => SpinningUp,
        (SpinningUp, DriveEvent::Tick(ms)) if *ms >= cfg.spin_up_ms => ReadingTag,
        (s, DriveEvent::Tick(_)) => s,
        (ReadingTag, DriveEvent::TagRead(ReadResult::Ok(_))) => Authenticating,
        (ReadingTag, DriveEvent::TagRead(_)) if reads_done <= cfg.read_retries => ReadingTag,
        (ReadingTag, DriveEvent::TagRead(_)) => Ejecting,
        (Authenticating, DriveEvent::AuthDecision(true)) => Running,
        (Authenticating, DriveEvent::AuthDecision(false)) => Ejecting,
        (state, event) => {
            return Err(ControllerError::IllegalTransition {
                state,
                event: event.name(),
            })
        }
    };
    Ok((next, next.signals()))
}

/// True iff the read produced a code present in `db`. A code of the wrong
/// width never matches.
pub fn authenticate(read: &ReadResult, db: &CodeDatabase) -> bool {
    match read {
        ReadResult::Ok(code) => db.contains(code).unwrap_or(false),
        _ => false,
    }
}

/// One drive: the state machine plus the disc it currently holds.
#[derive(Debug, Clone)]
pub struct DriveController {
    cfg: DriveConfig,
    state: DriveState,
    disc: Option<Disc>,
    reads_done: u32,
    code: Option<TagCode>,
}

impl DriveController {
    pub fn new(cfg: DriveConfig) -> Result<Self, ControllerError> {
        cfg.validate()?;
        Ok(DriveController {
            cfg,
            state: DriveState::Idle,
            disc: None,
            reads_done: 0,
            code: None,
        })
    }

    pub fn state(&self) -> DriveState {
        self.state
    }

    pub fn signals(&self) -> OutputSignals {
        self.state.signals()
    }

    pub fn config(&self) -> &DriveConfig {
        &self.cfg
    }

    pub fn disc(&self) -> Option<&Disc> {
        self.disc.as_ref()
    }

    /// Tag reads performed for the current insertion.
    pub fn reads_done(&self) -> u32 {
        self.reads_done
    }

    pub fn handle(&mut self, event: DriveEvent) -> Result<OutputSignals, ControllerError> {
        let reads = match event {
            DriveEvent::TagRead(_) => self.reads_done + 1,
            _ => self.reads_done,
        };
        let (next, signals) = step(self.state, &event, &self.cfg, reads)?;
        match event {
            DriveEvent::InsertDisc(disc) => {
                self.disc = Some(*disc);
                self.reads_done = 0;
                self.code = None;
            }
            DriveEvent::RemoveDisc => {
                self.disc = None;
                self.reads_done = 0;
                self.code = None;
            }
            DriveEvent::TagRead(result) => {
                self.reads_done = reads;
                self.code = result.code().cloned();
            }
            _ => {}
        }
        self.state = next;
        Ok(signals)
    }

    /// Reads the current tag through `chan` and feeds the result back in.
    pub fn read_once(&mut self, chan: &mut ReadChannel) -> Result<ReadResult, ControllerError> {
        if self.state != DriveState::ReadingTag {
            return Err(ControllerError::IllegalTransition {
                state: self.state,
                event: "TagRead",
            });
        }
        let disc = self.disc.as_ref().expect("a disc is present while reading");
        let result = read_tag(disc, &self.cfg, chan);
        self.handle(DriveEvent::TagRead(result.clone()))?;
        Ok(result)
    }

    /// Matches the code read for this insertion against `db`.
    pub fn decide(&mut self, db: &CodeDatabase) -> Result<bool, ControllerError> {
        let read = match &self.code {
            Some(c) => ReadResult::Ok(c.clone()),
            None => ReadResult::NoTagDetected,
        };
        let ok = authenticate(&read, db);
        self.handle(DriveEvent::AuthDecision(ok))?;
        Ok(ok)
    }

    /// Decrypts the inserted disc's content. Refused outside `Running`.
    pub fn read_content(&self) -> Result<Vec<Vec<u8>>, ControllerError> {
        if self.state != DriveState::Running {
            return Err(ControllerError::NotRunning(self.state));
        }
        let disc = self.disc.as_ref().expect("a disc is present while running");
        let image = disc.content.as_ref().ok_or(ControllerError::NoContent)?;
        let code = self.code.as_ref().expect("running implies a code was read");
        Ok(open_content(image, code, &disc.serial)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Insert(Box<Disc>),
    Remove,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledEvent {
    pub t_ms: u64,
    pub action: Action,
}

impl ScheduledEvent {
    pub fn insert(t_ms: u64, disc: Disc) -> Self {
        ScheduledEvent {
            t_ms,
            action: Action::Insert(Box::new(disc)),
        }
    }

    pub fn remove(t_ms: u64) -> Self {
        ScheduledEvent {
            t_ms,
            action: Action::Remove,
        }
    }
}

/// What became of one insertion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertionReport {
    pub t_ms: u64,
    pub serial: VisibleSerial,
    pub reads: u32,
    /// `Running` or `Ejecting`, or `None` if removed before a decision.
    pub outcome: Option<DriveState>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioRun {
    pub trace: SignalTrace,
    pub insertions: Vec<InsertionReport>,
}

#[derive(Debug, Clone, Copy)]
enum Pending {
    SpunUp,
    ReadDone,
    AuthDone,
}

struct Sim<'a> {
    ctrl: DriveController,
    db: &'a CodeDatabase,
    trace: Vec<TraceSample>,
    insertions: Vec<InsertionReport>,
    pending: Option<(u64, Pending)>,
    chan: Option<ReadChannel>,
}

impl Sim<'_> {
    fn record(&mut self, t_ms: u64) {
        let sample = TraceSample::new(t_ms, self.ctrl.state());
        match self.trace.last_mut() {
            // zero-length states (spin_up_ms = 0) collapse into their successor
            Some(last) if last.t_ms == t_ms => *last = sample,
            _ => self.trace.push(sample),
        }
    }

    fn settle(&mut self, t_ms: u64) {
        if let Some(last) = self.insertions.last_mut() {
            last.reads = self.ctrl.reads_done();
            if matches!(
                self.ctrl.state(),
                DriveState::Running | DriveState::Ejecting
            ) {
                last.outcome = Some(self.ctrl.state());
            }
        }
        self.record(t_ms);
    }

    /// Runs internal events due strictly before `until`.
    fn advance(&mut self, until: Option<u64>) -> Result<(), ControllerError> {
        while let Some((at, what)) = self.pending {
            if until.is_some_and(|u| at >= u) {
                break;
            }
            let cfg = self.ctrl.config().clone();
            self.pending = None;
            match what {
                Pending::SpunUp => {
                    self.ctrl.handle(DriveEvent::Tick(cfg.spin_up_ms))?;
                    self.settle(at);
                    self.pending = Some((at + cfg.read_ms, Pending::ReadDone));
                }
                Pending::ReadDone => {
                    let chan = self.chan.as_mut().expect("channel set on insert");
                    self.ctrl.read_once(chan)?;
                    match self.ctrl.state() {
                        DriveState::ReadingTag => {
                            self.pending = Some((at + cfg.read_ms, Pending::ReadDone))
                        }
                        DriveState::Authenticating => {
                            self.settle(at);
                            self.pending = Some((at + cfg.auth_ms, Pending::AuthDone));
                        }
                        _ => self.settle(at),
                    }
                }
                Pending::AuthDone => {
                    self.ctrl.decide(self.db)?;
                    self.settle(at);
                }
            }
        }
        Ok(())
    }
}

/// Drives the controller through an insert/remove schedule.
///
/// Insertion `k` reads through stream `k` of `seed`. One trace sample is
/// emitted per state change. An external event at the same instant as an
/// internal one takes precedence and cancels it.
pub fn simulate(
    events: &[ScheduledEvent],
    db: &CodeDatabase,
    cfg: &DriveConfig,
    seed: u64,
) -> Result<ScenarioRun, ControllerError> {
    let mut sim = Sim {
        ctrl: DriveController::new(cfg.clone())?,
        db,
        trace: vec![TraceSample::new(0, DriveState::Idle)],
        insertions: Vec::new(),
        pending: None,
        chan: None,
    };
    let mut last_t = 0u64;
    for (i, ev) in events.iter().enumerate() {
        if ev.t_ms <= last_t {
            return Err(ControllerError::ScenarioMalformed(format!(
                "event {i} at t={} ms: times must be strictly increasing and start after t=0",
                ev.t_ms
            )));
        }
        last_t = ev.t_ms;
        sim.advance(Some(ev.t_ms))?;
        match &ev.action {
            Action::Insert(disc) => {
                if sim.ctrl.state() != DriveState::Idle {
                    return Err(ControllerError::ScenarioMalformed(format!(
                        "event {i} at t={} ms inserts into an occupied drive",
                        ev.t_ms
                    )));
                }
                sim.ctrl.handle(DriveEvent::InsertDisc(disc.clone()))?;
                sim.chan = Some(ReadChannel::stream(seed, sim.insertions.len() as u64, cfg));
                sim.insertions.push(InsertionReport {
                    t_ms: ev.t_ms,
                    serial: disc.serial.clone(),
                    reads: 0,
                    outcome: None,
                });
                sim.record(ev.t_ms);
                sim.pending = Some((ev.t_ms + cfg.spin_up_ms, Pending::SpunUp));
            }
            Action::Remove => {
                let before = sim.ctrl.state();
                sim.ctrl.handle(DriveEvent::RemoveDisc)?;
                sim.pending = None;
                sim.chan = None;
                if before != DriveState::Idle {
                    sim.record(ev.t_ms);
                }
            }
        }
    }
    sim.advance(None)?;
    Ok(ScenarioRun {
        trace: SignalTrace::from_samples(sim.trace),
        insertions: sim.insertions,
    })
}

/// [`simulate`], keeping only the trace.
pub fn run_scenario(
    events: &[ScheduledEvent],
    db: &CodeDatabase,
    cfg: &DriveConfig,
    seed: u64,
) -> Result<SignalTrace, ControllerError> {
    simulate(events, db, cfg, seed).map(|r| r.trace)
}
