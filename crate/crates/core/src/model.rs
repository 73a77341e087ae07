//! Shared domain types: turns, sessions, verdicts, and the rolling audit window.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Who produced a turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
    System,
}

/// One message in a conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// Position within the session, starting at 0 with no gaps.
    pub index: usize,
    pub role: Role,
    pub text: String,
    /// UTC milliseconds (or a logical counter in deterministic test mode).
    pub timestamp: u64,
}

/// The five pipeline configurations, from no defense to the direct ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineVariant {
    V0Zero,
    V1Norms,
    V2Gatekeeper,
    V3ReverseRag,
    /// Bare completion with norms directive; keeps injection/leak scans but
    /// omits intent routing and relevance gating by construction.
    V4DirectAblation,
}

impl PipelineVariant {
    pub const ALL: [PipelineVariant; 5] = [
        PipelineVariant::V0Zero,
        PipelineVariant::V1Norms,
        PipelineVariant::V2Gatekeeper,
        PipelineVariant::V3ReverseRag,
        PipelineVariant::V4DirectAblation,
    ];

    /// Short display label matching the report column headers.
    pub fn label(&self) -> &'static str {
        match self {
            PipelineVariant::V0Zero => "Zero",
            PipelineVariant::V1Norms => "Norms",
            PipelineVariant::V2Gatekeeper => "Gatekeeper",
            PipelineVariant::V3ReverseRag => "Reverse RAG",
            PipelineVariant::V4DirectAblation => "Direct",
        }
    }

    pub fn parse(s: &str) -> Option<PipelineVariant> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v0" | "v0_zero" | "zero" => Some(PipelineVariant::V0Zero),
            "v1" | "v1_norms" | "norms" => Some(PipelineVariant::V1Norms),
            "v2" | "v2_gatekeeper" | "gatekeeper" => Some(PipelineVariant::V2Gatekeeper),
            "v3" | "v3_reverse_rag" | "reverse_rag" => Some(PipelineVariant::V3ReverseRag),
            "v4" | "v4_direct_ablation" | "direct" => Some(PipelineVariant::V4DirectAblation),
            _ => None,
        }
    }
}

impl std::fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PipelineVariant::V0Zero => "v0_zero",
            PipelineVariant::V1Norms => "v1_norms",
            PipelineVariant::V2Gatekeeper => "v2_gatekeeper",
            PipelineVariant::V3ReverseRag => "v3_reverse_rag",
            PipelineVariant::V4DirectAblation => "v4_direct_ablation",
        };
        f.write_str(s)
    }
}

/// Critical-prompt-event tags. The first four are the gatekeeper decision
/// table verbatim; the last two are extensions housing the post-generation
/// checks (leak scan and justification hook) and the rolling-window audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CpeTag {
    #[serde(rename = "CPE_INTENT_BLOCK")]
    CpeIntentBlock,
    #[serde(rename = "CPE_LOW_REL")]
    CpeLowRel,
    #[serde(rename = "CPE_INJ_REGEX")]
    CpeInjRegex,
    #[serde(rename = "CPE_ALLOW")]
    CpeAllow,
    #[serde(rename = "CPE_LEAK_SCAN")]
    CpeLeakScan,
    #[serde(rename = "CPE_MEMORY_AUDIT")]
    CpeMemoryAudit,
}

impl CpeTag {
    /// Whether the tag belongs to the gatekeeper decision table (as opposed
    /// to the auxiliary audit/leak extensions).
    pub fn is_decision_tag(&self) -> bool {
        matches!(
            self,
            CpeTag::CpeIntentBlock | CpeTag::CpeLowRel | CpeTag::CpeInjRegex | CpeTag::CpeAllow
        )
    }
}

impl std::fmt::Display for CpeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CpeTag::CpeIntentBlock => "CPE_INTENT_BLOCK",
            CpeTag::CpeLowRel => "CPE_LOW_REL",
            CpeTag::CpeInjRegex => "CPE_INJ_REGEX",
            CpeTag::CpeAllow => "CPE_ALLOW",
            CpeTag::CpeLeakScan => "CPE_LEAK_SCAN",
            CpeTag::CpeMemoryAudit => "CPE_MEMORY_AUDIT",
        };
        f.write_str(s)
    }
}

/// Attack taxonomy used for corpus labeling and per-category block tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackCategory {
    DoubleCharacter,
    Virtualization,
    Obfuscation,
    PayloadSplitting,
    AdversarialSuffix,
    InstructionManipulation,
    /// Adversarial prompts outside the six named families; also the fixed
    /// category for benign samples.
    Uncategorized,
}

impl AttackCategory {
    pub const ALL: [AttackCategory; 7] = [
        AttackCategory::DoubleCharacter,
        AttackCategory::Virtualization,
        AttackCategory::Obfuscation,
        AttackCategory::PayloadSplitting,
        AttackCategory::AdversarialSuffix,
        AttackCategory::InstructionManipulation,
        AttackCategory::Uncategorized,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AttackCategory::DoubleCharacter => "Double Character",
            AttackCategory::Virtualization => "Virtualization",
            AttackCategory::Obfuscation => "Obfuscation",
            AttackCategory::PayloadSplitting => "Payload Splitting",
            AttackCategory::AdversarialSuffix => "Adversarial Suffix",
            AttackCategory::InstructionManipulation => "Instruction Manipulation",
            AttackCategory::Uncategorized => "Uncategorized",
        }
    }
}

/// What the gateway decided to do with a turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardAction {
    Allow,
    RefuseRedirect,
    SelfIntro,
    Clarify,
    Block,
}

impl GuardAction {
    /// A sample counts as blocked only on hard refusals; Clarify merely
    /// delays the attacker and is credited as a miss.
    pub fn is_blocked(&self) -> bool {
        matches!(self, GuardAction::RefuseRedirect | GuardAction::Block)
    }
}

/// The per-turn decision returned by the pipeline.
///
/// `answer` is present exactly when `action` is [`GuardAction::Allow`]; for
/// every other action the user-facing refusal/clarification text is `reason`
/// and `cpe_tags` is non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardVerdict {
    pub action: GuardAction,
    pub reason: String,
    pub cpe_tags: Vec<CpeTag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl GuardVerdict {
    pub fn allow(reason: impl Into<String>, answer: impl Into<String>) -> GuardVerdict {
        GuardVerdict {
            action: GuardAction::Allow,
            reason: reason.into(),
            cpe_tags: vec![CpeTag::CpeAllow],
            answer: Some(answer.into()),
        }
    }

    /// Build a non-Allow verdict. Panics if `tags` is empty or the action is
    /// `Allow`: both would break the verdict invariants.
    pub fn denied(action: GuardAction, reason: impl Into<String>, tags: Vec<CpeTag>) -> GuardVerdict {
        assert!(action != GuardAction::Allow, "use GuardVerdict::allow");
        assert!(!tags.is_empty(), "non-Allow verdicts must carry CPE tags");
        GuardVerdict {
            action,
            reason: reason.into(),
            cpe_tags: tags,
            answer: None,
        }
    }
}

/// Millisecond time source. `Logical` substitutes a shared counter so that
/// repeated runs produce byte-identical logs.
#[derive(Debug, Clone, Default)]
pub enum Clock {
    #[default]
    Wall,
    Logical(Arc<AtomicU64>),
}

impl Clock {
    pub fn wall() -> Clock {
        Clock::Wall
    }

    /// A fresh logical clock starting at 0.
    pub fn logical() -> Clock {
        Clock::Logical(Arc::new(AtomicU64::new(0)))
    }

    pub fn now_ms(&self) -> u64 {
        match self {
            Clock::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            Clock::Logical(counter) => counter.fetch_add(1, Ordering::SeqCst),
        }
    }
}


/// An ordered conversation bound to one pipeline variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub turns: Vec<Turn>,
    pub variant: PipelineVariant,
    #[serde(skip, default)]
    clock: Clock,
    #[serde(skip, default)]
    last_timestamp: u64,
}

impl Session {
    pub fn new(id: impl Into<String>, variant: PipelineVariant) -> Session {
        Session::with_clock(id, variant, Clock::Wall)
    }

    pub fn with_clock(id: impl Into<String>, variant: PipelineVariant, clock: Clock) -> Session {
        let id = id.into();
        assert!(!id.is_empty(), "session id must be non-empty");
        Session {
            id,
            turns: Vec::new(),
            variant,
            clock,
            last_timestamp: 0,
        }
    }

    /// Append a turn with the next index and a monotone timestamp.
    pub fn append_turn(&mut self, role: Role, text: impl Into<String>) -> &Turn {
        let index = self.turns.len();
        let now = self.clock.now_ms().max(self.last_timestamp);
        self.last_timestamp = now;
        self.turns.push(Turn {
            index,
            role,
            text: text.into(),
            timestamp: now,
        });
        &self.turns[index]
    }

    /// The texts of the last `w` user turns, oldest first. Fewer than `w`
    /// user turns returns all of them.
    pub fn window_user_texts(&self, w: usize) -> Vec<&str> {
        assert!(w >= 1, "window width must be at least 1");
        let user_texts: Vec<&str> = self
            .turns
            .iter()
            .filter(|t| t.role == Role::User)
            .map(|t| t.text.as_str())
            .collect();
        let start = user_texts.len().saturating_sub(w);
        user_texts[start..].to_vec()
    }

    /// Rolling-window audit input: the last `w` user texts joined with a
    /// single newline, oldest first.
    pub fn window_concat(&self, w: usize) -> String {
        self.window_user_texts(w).join("\n")
    }
}

/// Joins window segments and records the byte range each segment occupies in
/// the joined string, so a detector hit can be attributed to one segment or
/// recognized as spanning a turn boundary.
pub fn join_with_offsets(segments: &[&str]) -> (String, Vec<std::ops::Range<usize>>) {
    let mut joined = String::new();
    let mut ranges = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        if i > 0 {
            joined.push('\n');
        }
        let start = joined.len();
        joined.push_str(seg);
        ranges.push(start..joined.len());
    }
    (joined, ranges)
}
