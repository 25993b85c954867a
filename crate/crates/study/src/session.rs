//! Participant sessions: randomized pages, forward-only submission.

use crate::config::{Criterion, StudyConfig, SCALE_INITIAL, SCALE_MAX, SCALE_MIN};
use crate::record::RatingRecord;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubmitError {
    #[error("navigation locked: page {page} was already submitted (current page {current})")]
    NavigationLocked { page: usize, current: usize },
    #[error("page {page} is not reachable yet (current page {current})")]
    NotReached { page: usize, current: usize },
    #[error("session already completed")]
    Completed,
    #[error("missing ratings for slots {0:?}")]
    Missing(Vec<usize>),
    #[error("duplicate rating for slot {0}")]
    Duplicate(usize),
    #[error("unknown slot {0}")]
    UnknownSlot(usize),
    #[error("score {score} for slot {slot} outside [{SCALE_MIN}, {SCALE_MAX}]")]
    OutOfRange { slot: usize, score: i64 },
}

/// One video on a page. `slot` is the on-screen position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoSlot {
    pub slot: usize,
    pub condition: String,
    pub uri: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub criterion: Criterion,
    pub sequence_id: String,
    pub videos: Vec<VideoSlot>,
}

impl Page {
    pub fn muted(&self) -> bool {
        self.criterion.muted()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub participant_id: String,
    pub pages: Vec<Page>,
    pub current: usize,
    pub completed: bool,
}

/// Participant-facing video reference; the condition stays hidden.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRef {
    pub slot: usize,
    pub uri: String,
    pub muted: bool,
}

/// What the client needs to render the current page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PagePayload {
    pub participant_id: String,
    pub page_index: usize,
    pub page_count: usize,
    pub criterion: Criterion,
    pub question: String,
    pub muted: bool,
    pub scale_min: u32,
    pub scale_max: u32,
    pub scale_initial: u32,
    pub videos: Vec<VideoRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRating {
    pub slot: usize,
    pub score: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSubmission {
    pub page_index: usize,
    pub ratings: Vec<SlotRating>,
}

/// Page orders are shuffled within each criterion block; blocks keep the
/// believability-then-coordination order. Video positions are shuffled per page.
pub fn create_session<R: Rng + ?Sized>(
    cfg: &StudyConfig,
    participant_id: &str,
    rng: &mut R,
) -> SessionState {
    let mut pages = Vec::with_capacity(cfg.page_count());
    for criterion in Criterion::ORDER {
        let mut seqs = cfg.sequences.clone();
        seqs.shuffle(rng);
        for seq in seqs {
            let mut conds = cfg.conditions.clone();
            conds.shuffle(rng);
            let videos = conds
                .into_iter()
                .enumerate()
                .map(|(slot, condition)| VideoSlot {
                    slot,
                    uri: cfg.video_uri(criterion, &seq, &condition),
                    condition,
                })
                .collect();
            pages.push(Page {
                criterion,
                sequence_id: seq,
                videos,
            });
        }
    }
    SessionState {
        participant_id: participant_id.to_string(),
        pages,
        current: 0,
        completed: false,
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100000001b3)
    })
}

/// Per-participant generator: the study seed picks the key, the participant
/// id picks the stream, so orders are reproducible and independent.
pub fn participant_rng(study_seed: u64, participant_id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(study_seed);
    rng.set_stream(fnv1a(participant_id));
    rng
}

impl SessionState {
    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn current_page(&self) -> Option<&Page> {
        if self.completed {
            None
        } else {
            self.pages.get(self.current)
        }
    }

    pub fn payload(&self, cfg: &StudyConfig) -> Option<PagePayload> {
        let page = self.current_page()?;
        Some(PagePayload {
            participant_id: self.participant_id.clone(),
            page_index: self.current,
            page_count: self.page_count(),
            criterion: page.criterion,
            question: cfg.question(page.criterion).to_string(),
            muted: page.muted(),
            scale_min: SCALE_MIN,
            scale_max: SCALE_MAX,
            scale_initial: SCALE_INITIAL,
            videos: page
                .videos
                .iter()
                .map(|v| VideoRef {
                    slot: v.slot,
                    uri: v.uri.clone(),
                    muted: page.muted(),
                })
                .collect(),
        })
    }

    /// Checks a submission against the current page and turns it into
    /// records. Does not advance; call [`SessionState::advance`] once the
    /// records are stored.
    pub fn validate(
        &self,
        sub: &PageSubmission,
        timestamp_ms: u64,
    ) -> Result<Vec<RatingRecord>, SubmitError> {
        if sub.page_index < self.current {
            return Err(SubmitError::NavigationLocked {
                page: sub.page_index,
                current: self.current,
            });
        }
        if self.completed {
            return Err(SubmitError::Completed);
        }
        if sub.page_index > self.current {
            return Err(SubmitError::NotReached {
                page: sub.page_index,
                current: self.current,
            });
        }
        let page = &self.pages[self.current];
        let mut scores: Vec<Option<u32>> = vec![None; page.videos.len()];
        for r in &sub.ratings {
            let cell = scores.get_mut(r.slot).ok_or(SubmitError::UnknownSlot(r.slot))?;
            if cell.is_some() {
                return Err(SubmitError::Duplicate(r.slot));
            }
            if r.score < i64::from(SCALE_MIN) || r.score > i64::from(SCALE_MAX) {
                return Err(SubmitError::OutOfRange {
                    slot: r.slot,
                    score: r.score,
                });
            }
            *cell = Some(r.score as u32);
        }
        let missing: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_none()).collect();
        if !missing.is_empty() {
            return Err(SubmitError::Missing(missing));
        }
        Ok(page
            .videos
            .iter()
            .zip(scores)
            .map(|(v, s)| RatingRecord {
                participant_id: self.participant_id.clone(),
                criterion: page.criterion,
                sequence_id: page.sequence_id.clone(),
                condition: v.condition.clone(),
                score: s.expect("checked above"),
                page_index: self.current,
                position: v.slot,
                timestamp_ms,
            })
            .collect())
    }

    pub fn advance(&mut self) {
        self.current += 1;
        if self.current >= self.pages.len() {
            self.completed = true;
        }
    }

    /// Validate and advance in one step, for callers without a store.
    pub fn submit(
        &mut self,
        sub: &PageSubmission,
        timestamp_ms: u64,
    ) -> Result<Vec<RatingRecord>, SubmitError> {
        let records = self.validate(sub, timestamp_ms)?;
        self.advance();
        Ok(records)
    }
}
