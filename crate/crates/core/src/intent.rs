//! Intent routing: classify each user turn as tourism, self-directed, or
//! other before anything else runs.

use regex::Regex;

use crate::grounded::ModelBackend;

/// Routing outcome for one turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intent {
    Tourism,
    SelfIntro,
    Other,
}

/// Which engine decides. Rule-based scoring is the default so the whole
/// pipeline runs deterministically offline; a model backend is opt-in and
/// degrades to the rules on any backend error.
#[derive(Debug, Clone)]
pub enum RouterBackend {
    RuleBased,
    ModelBacked { directive: String },
}

#[derive(Debug, Clone)]
pub struct IntentRouterConfig {
    tourism: Vec<(Regex, f64)>,
    self_refs: Vec<(Regex, f64)>,
    pub min_score: f64,
    pub backend: RouterBackend,
}

/// Lexicon phrases tolerate whitespace runs between words and an optional
/// trailing plural `s`, so "campsite" also matches "campsites".
fn phrase_regex(phrase: &str) -> Regex {
    let words: Vec<String> = phrase.split_whitespace().map(regex::escape).collect();
    Regex::new(&format!(r"(?i)\b{}s?\b", words.join(r"\s+"))).expect("escaped phrase compiles")
}

const TOURISM_LEXICON: &[&str] = &[
    // food
    "restaurant", "eat", "food", "meal", "snack", "dining", "dinner", "lunch", "breakfast",
    "night market", "street food", "noodle", "dumpling", "vegetarian", "cafe", "tea house",
    "bubble tea", "dessert",
    // lodging
    "hotel", "hostel", "lodging", "homestay", "guesthouse", "camping", "campsite", "campground",
    "stay overnight", "check in", "bed and breakfast",
    // transport
    "bus", "train", "station", "taxi", "transport", "transit", "route", "high speed rail",
    "scooter", "bike rental", "parking", "airport", "ferry", "timetable",
    // safety
    "safety", "safe", "emergency", "typhoon", "closure", "hazard", "first aid", "police",
    "crowded", "weather warning",
    // accessibility
    "accessible", "accessibility", "wheelchair", "stroller", "elevator", "ramp", "barrier free",
    // general tourism
    "attraction", "sight", "sightseeing", "museum", "temple", "park", "trail", "hike", "beach",
    "zoo", "garden", "hot spring", "festival", "itinerary", "tour", "trip", "travel", "visit",
    "ticket", "opening hours", "souvenir", "viewpoint", "old street", "lantern", "glass museum",
    "Hsinchu",
];

const SELF_LEXICON: &[&str] = &[
    "who are you",
    "what are you",
    "your name",
    "who made you",
    "what can you do",
    "introduce yourself",
    "tell me about yourself",
    "what is your purpose",
    "are you a bot",
    "are you human",
];

impl Default for IntentRouterConfig {
    fn default() -> Self {
        IntentRouterConfig {
            tourism: TOURISM_LEXICON.iter().map(|p| (phrase_regex(p), 1.0)).collect(),
            self_refs: SELF_LEXICON.iter().map(|p| (phrase_regex(p), 1.0)).collect(),
            min_score: 1.0,
            backend: RouterBackend::RuleBased,
        }
    }
}

impl IntentRouterConfig {
    /// Extend the tourism vocabulary (weight 1.0 unless given).
    pub fn add_tourism_phrase(&mut self, phrase: &str, weight: f64) {
        self.tourism.push((phrase_regex(phrase), weight));
    }

    pub fn add_self_phrase(&mut self, phrase: &str, weight: f64) {
        self.self_refs.push((phrase_regex(phrase), weight));
    }

    fn score(&self, lexicon: &[(Regex, f64)], text: &str) -> f64 {
        lexicon
            .iter()
            .filter(|(rx, _)| rx.is_match(text))
            .map(|(_, w)| w)
            .sum()
    }
}

/// Classify a (normalized) turn. Total and pure under the rule-based
/// backend: tourism wins at or above `min_score` when it at least ties the
/// self score; a dominating self score yields `SelfIntro`; everything else is
/// `Other`.
pub fn classify_intent(text: &str, cfg: &IntentRouterConfig) -> (Intent, f64) {
    let tourism = cfg.score(&cfg.tourism, text);
    let self_score = cfg.score(&cfg.self_refs, text);
    if tourism >= cfg.min_score && tourism >= self_score {
        (Intent::Tourism, tourism)
    } else if self_score >= cfg.min_score && self_score > tourism {
        (Intent::SelfIntro, self_score)
    } else {
        (Intent::Other, tourism.max(self_score))
    }
}

/// Model-backed classification with rule-based fallback. The backend gets a
/// fixed classification directive and must answer `tourism`, `self`, or
/// `other`; anything else (or any backend error) falls back to the rules.
pub fn classify_intent_with(
    text: &str,
    cfg: &IntentRouterConfig,
    backend: &dyn ModelBackend,
) -> (Intent, f64) {
    let RouterBackend::ModelBacked { directive } = &cfg.backend else {
        return classify_intent(text, cfg);
    };
    match backend.complete(directive, "", text, 0.0, 8) {
        Ok(reply) => match reply.trim().to_lowercase().as_str() {
            label if label.starts_with("tourism") => (Intent::Tourism, 1.0),
            label if label.starts_with("self") => (Intent::SelfIntro, 1.0),
            label if label.starts_with("other") => (Intent::Other, 1.0),
            _ => classify_intent(text, cfg),
        },
        Err(_) => classify_intent(text, cfg),
    }
}
