//! Instrumentation proving that inference never touches ground-truth
//! questions or answers.
//!
//! Ground truth is wrapped in [`GroundTruth`]; every read goes through
//! [`GroundTruth::read`], which counts reads made while the current thread is
//! in [`Phase::Inference`]. Counters are per thread so concurrent test
//! threads cannot disturb each other.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Building guidance from QA (concept filtering, gold slots).
    Selection,
    Training,
    /// Model forward passes that produce questions.
    Inference,
    /// Comparing generated questions with references.
    Scoring,
}

thread_local! {
    static PHASE: Cell<Phase> = const { Cell::new(Phase::Selection) };
    static INFERENCE_READS: Cell<u64> = const { Cell::new(0) };
    static TOTAL_READS: Cell<u64> = const { Cell::new(0) };
}

pub fn current_phase() -> Phase {
    PHASE.with(Cell::get)
}

/// Restores the previous phase on drop.
#[must_use = "the phase ends when the guard is dropped"]
pub struct PhaseGuard {
    previous: Phase,
}

impl Drop for PhaseGuard {
    fn drop(&mut self) {
        PHASE.with(|p| p.set(self.previous));
    }
}

pub fn enter(phase: Phase) -> PhaseGuard {
    let previous = PHASE.with(|p| p.replace(phase));
    PhaseGuard { previous }
}

/// Reads of ground truth made on this thread during inference.
pub fn inference_reads() -> u64 {
    INFERENCE_READS.with(Cell::get)
}

/// All ground-truth reads made on this thread.
pub fn total_reads() -> u64 {
    TOTAL_READS.with(Cell::get)
}

#[derive(Clone, Debug)]
pub struct GroundTruth<T>(T);

impl<T> GroundTruth<T> {
    pub fn new(value: T) -> Self {
        Self(value)
    }

    pub fn read(&self) -> &T {
        TOTAL_READS.with(|c| c.set(c.get() + 1));
        if current_phase() == Phase::Inference {
            INFERENCE_READS.with(|c| c.set(c.get() + 1));
            log::warn!("ground truth read during inference");
        }
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_are_counted_by_phase() {
        let gt = GroundTruth::new(vec!["what", "color"]);
        let before = inference_reads();
        {
            let _g = enter(Phase::Scoring);
            assert_eq!(gt.read().len(), 2);
        }
        assert_eq!(inference_reads(), before);
        {
            let _g = enter(Phase::Inference);
            let _ = gt.read();
            {
                let _inner = enter(Phase::Selection);
                let _ = gt.read();
            }
            assert_eq!(current_phase(), Phase::Inference);
        }
        assert_eq!(inference_reads(), before + 1);
        assert_eq!(current_phase(), Phase::Selection);
    }
}
