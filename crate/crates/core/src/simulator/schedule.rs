use crate::error::{GridError, Result};
use crate::loadmodel::ZipLoadBank;

/// Linear ramp of one load's ZIP components to `target` over `[t_start, t_end]`.
///
/// `t_start == t_end` gives a step change that takes effect for steps starting
/// at or after `t_start`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadEvent {
    pub load: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// `(I*, Y*, P*)` reached at `t_end`.
    pub target: (f64, f64, f64),
}

#[derive(Debug, Clone, Copy)]
struct Ramp {
    event: LoadEvent,
    from: (f64, f64, f64),
}

/// Time-varying load bank built from an initial bank and a list of events.
#[derive(Debug, Clone)]
pub struct LoadSchedule {
    initial: ZipLoadBank,
    ramps: Vec<Ramp>,
}

impl LoadSchedule {
    pub fn new(initial: ZipLoadBank, events: &[LoadEvent]) -> Result<Self> {
        let mut current = initial.clone();
        let mut busy_until = vec![f64::NEG_INFINITY; initial.len()];
        let mut ramps = Vec::with_capacity(events.len());
        let mut last_start = f64::NEG_INFINITY;
        for (k, ev) in events.iter().enumerate() {
            if ev.load >= initial.len() {
                return Err(GridError::InvalidParameter(format!(
                    "event {k} references load {} of {}",
                    ev.load,
                    initial.len()
                )));
            }
            if !(ev.t_start >= 0.0 && ev.t_end >= ev.t_start && ev.t_end.is_finite()) {
                return Err(GridError::InvalidParameter(format!(
                    "event {k} has invalid window [{}, {}]",
                    ev.t_start, ev.t_end
                )));
            }
            if ev.t_start < last_start {
                return Err(GridError::InvalidParameter(format!(
                    "event {k} is not sorted by start time"
                )));
            }
            if ev.t_start < busy_until[ev.load] {
                return Err(GridError::InvalidParameter(format!(
                    "event {k} overlaps an earlier event on load {}",
                    ev.load
                )));
            }
            last_start = ev.t_start;
            busy_until[ev.load] = ev.t_end;
            let from = (
                current.istar()[ev.load],
                current.ystar()[ev.load],
                current.pstar()[ev.load],
            );
            let (i, y, p) = ev.target;
            current = current.with_load(ev.load, i, y, p)?;
            ramps.push(Ramp { event: *ev, from });
        }
        Ok(Self { initial, ramps })
    }

    pub fn initial(&self) -> &ZipLoadBank {
        &self.initial
    }

    /// Bank once every event has completed.
    pub fn final_bank(&self) -> ZipLoadBank {
        self.bank_at(f64::INFINITY, f64::INFINITY)
    }

    pub fn has_events(&self) -> bool {
        !self.ramps.is_empty()
    }

    /// Latest event completion time (0 without events).
    pub fn settled_after(&self) -> f64 {
        self.ramps.iter().map(|r| r.event.t_end).fold(0.0, f64::max)
    }

    /// Times where load parameters are non-smooth; integrators must step onto these.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self
            .ramps
            .iter()
            .flat_map(|r| [r.event.t_start, r.event.t_end])
            .collect();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }

    /// Bank in effect at `t` inside a step that began at `step_start`.
    pub fn bank_at(&self, t: f64, step_start: f64) -> ZipLoadBank {
        let mut bank = self.initial.clone();
        for r in &self.ramps {
            let ev = &r.event;
            let frac = if ev.t_end > ev.t_start {
                ((t - ev.t_start) / (ev.t_end - ev.t_start)).clamp(0.0, 1.0)
            } else if step_start >= ev.t_start {
                1.0
            } else {
                continue;
            };
            if frac == 0.0 {
                continue;
            }
            let lerp = |a: f64, b: f64| a + (b - a) * frac;
            let (i, y, p) = ev.target;
            bank.set_load_unchecked(
                ev.load,
                lerp(r.from.0, i),
                lerp(r.from.1, y),
                lerp(r.from.2, p),
            );
        }
        bank
    }
}
