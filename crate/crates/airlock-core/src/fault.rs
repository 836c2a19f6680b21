//! Kill-point injection used by the crash-safety tests.
//!
//! A component armed with a [`FaultPoint`] aborts with no cleanup the first
//! time execution reaches that point, simulating a process crash at that
//! exact step. Production paths leave the plan unarmed.

/// Named abort points at journal and filesystem transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultPoint {
    // transfer engine
    AfterJobJournaled,
    AfterFlagConsumed,
    AfterScanningJournaled,
    AfterStageCopy,
    AfterSourceUnlinked,
    AfterStageRename,
    AfterFirstFileMoved,
    BeforeTerminalJournaled,
    AfterQuarantineStageCopy,
    AfterQuarantineSourceUnlinked,
    AfterFirstFileQuarantined,
    BeforeQuarantineJournaled,
    // freeze / restore
    AfterReceiptWritten,
    MidFreezeChmod,
    BeforeRecordFrozen,
    AfterRestorePhase,
    MidRestoreChmod,
    BeforeReceiptRemoved,
}

/// Single-shot trigger. `trip` returns true exactly once, when the armed
/// point is reached.
#[derive(Debug, Default, Clone)]
pub struct FaultPlan {
    armed: Option<FaultPoint>,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn at(point: FaultPoint) -> Self {
        Self { armed: Some(point) }
    }

    pub fn arm(&mut self, point: FaultPoint) {
        self.armed = Some(point);
    }

    pub fn trip(&mut self, point: FaultPoint) -> bool {
        if self.armed == Some(point) {
            self.armed = None;
            true
        } else {
            false
        }
    }
}
