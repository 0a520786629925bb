//! Token vocabulary, prompts, clips and clip features.
//!
//! A clip is a monophonic line on a grid of sixteenth-note steps. Each step
//! holds one action token: a note onset at one of 24 pitches (MIDI 48..=71),
//! a hold that extends the sounding note, or a rest. `PAD` only ever appears
//! as network input before the start of a sequence.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of steps in a clip.
pub const CLIP_LEN: usize = 72;
/// Number of distinct pitches.
pub const N_PITCHES: usize = 24;
/// Action vocabulary size (24 notes + HOLD + REST).
pub const N_ACTIONS: usize = 26;
/// Embeddable vocabulary size (actions + PAD).
pub const N_TOKENS: usize = 27;
/// MIDI pitch of `Token::Note(0)`.
pub const BASE_MIDI: u8 = 48;

pub const HOLD_ID: u32 = 24;
pub const REST_ID: u32 = 25;
pub const PAD_ID: u32 = 26;

/// Longest allowed run of identical consecutive onset pitches.
pub const MAX_REPEAT_RUN: usize = 4;
/// Largest allowed interval between consecutive onsets, in semitones.
pub const MAX_LEAP: u8 = 12;

/// Dimension of the prompt one-hot encoding (12 roots + 3 modes + 3 densities + 3 registers).
pub const PROMPT_DIM: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Note(u8),
    Hold,
    Rest,
    Pad,
}

impl Token {
    pub fn id(self) -> u32 {
        match self {
            Token::Note(p) => u32::from(p),
            Token::Hold => HOLD_ID,
            Token::Rest => REST_ID,
            Token::Pad => PAD_ID,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0..=23 => Ok(Token::Note(id as u8)),
            HOLD_ID => Ok(Token::Hold),
            REST_ID => Ok(Token::Rest),
            PAD_ID => Ok(Token::Pad),
            _ => Err(Error::TokenId(id)),
        }
    }

    /// Action tokens are the ones a policy may emit.
    pub fn from_action(action: usize) -> Self {
        debug_assert!(action < N_ACTIONS);
        Token::from_id(action as u32).expect("action index in range")
    }

    pub fn is_action(self) -> bool {
        !matches!(self, Token::Pad)
    }

    pub fn pitch(self) -> Option<u8> {
        match self {
            Token::Note(p) => Some(p),
            _ => None,
        }
    }
}

const PITCH_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Major,
    NaturalMinor,
    PentatonicMajor,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Major, Mode::NaturalMinor, Mode::PentatonicMajor];

    pub fn intervals(self) -> &'static [u8] {
        match self {
            Mode::Major => &[0, 2, 4, 5, 7, 9, 11],
            Mode::NaturalMinor => &[0, 2, 3, 5, 7, 8, 10],
            Mode::PentatonicMajor => &[0, 2, 4, 7, 9],
        }
    }

    fn word(self) -> &'static str {
        match self {
            Mode::Major => "major",
            Mode::NaturalMinor => "minor",
            Mode::PentatonicMajor => "major pentatonic",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Density {
    Low,
    Med,
    High,
}

impl Density {
    pub const ALL: [Density; 3] = [Density::Low, Density::Med, Density::High];

    /// Target fraction of sounding steps.
    pub fn target(self) -> f64 {
        match self {
            Density::Low => 0.25,
            Density::Med => 0.5,
            Density::High => 0.8,
        }
    }

    fn word(self) -> &'static str {
        match self {
            Density::Low => "sparse",
            Density::Med => "moderate",
            Density::High => "dense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Register {
    Low,
    Mid,
    High,
}

impl Register {
    pub const ALL: [Register; 3] = [Register::Low, Register::Mid, Register::High];

    /// Target mean normalized pitch.
    pub fn target(self) -> f64 {
        match self {
            Register::Low => 0.25,
            Register::Mid => 0.5,
            Register::High => 0.75,
        }
    }

    fn word(self) -> &'static str {
        match self {
            Register::Low => "low-register",
            Register::Mid => "mid-register",
            Register::High => "high-register",
        }
    }
}

/// Structured text prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub root: u8,
    pub mode: Mode,
    pub density: Density,
    pub register: Register,
}

/// Pitch-class membership table, indexed by pitch class 0..12.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale([bool; 12]);

impl Scale {
    pub fn new(root: u8, mode: Mode) -> Self {
        let mut set = [false; 12];
        for &iv in mode.intervals() {
            set[usize::from((root + iv) % 12)] = true;
        }
        Scale(set)
    }

    pub fn from_pitch_classes(classes: &[u8]) -> Self {
        let mut set = [false; 12];
        for &pc in classes {
            set[usize::from(pc % 12)] = true;
        }
        Scale(set)
    }

    /// Whether pitch index `p` (MIDI 48 + p) lies in the scale.
    pub fn contains_pitch(&self, p: u8) -> bool {
        self.0[usize::from((BASE_MIDI + p) % 12)]
    }
}

impl Prompt {
    /// Number of distinct prompts.
    pub const COUNT: usize = 12 * 3 * 3 * 3;

    pub fn new(root: u8, mode: Mode, density: Density, register: Register) -> Self {
        assert!(root < 12, "root pitch class out of range");
        Prompt {
            root,
            mode,
            density,
            register,
        }
    }

    /// Decode `index ∈ [0, 324)` into a prompt; inverse of [`Prompt::index`].
    pub fn from_index(index: usize) -> Self {
        assert!(index < Self::COUNT);
        let root = (index / 27) as u8;
        let rest = index % 27;
        Prompt {
            root,
            mode: Mode::ALL[rest / 9],
            density: Density::ALL[(rest / 3) % 3],
            register: Register::ALL[rest % 3],
        }
    }

    pub fn index(&self) -> usize {
        usize::from(self.root) * 27
            + self.mode.index() * 9
            + self.density as usize * 3
            + self.register as usize
    }

    pub fn all() -> impl Iterator<Item = Prompt> {
        (0..Self::COUNT).map(Prompt::from_index)
    }

    pub fn scale(&self) -> Scale {
        Scale::new(self.root, self.mode)
    }

    /// 21-dimensional one-hot encoding with exactly four active entries.
    pub fn one_hot(&self) -> [f64; PROMPT_DIM] {
        let mut v = [0.0; PROMPT_DIM];
        v[usize::from(self.root)] = 1.0;
        v[12 + self.mode.index()] = 1.0;
        v[15 + self.density as usize] = 1.0;
        v[18 + self.register as usize] = 1.0;
        v
    }

    pub fn text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "a {} {} melody in {} {}",
            self.density.word(),
            self.register.word(),
            PITCH_NAMES[usize::from(self.root)],
            self.mode.word()
        )
    }
}

impl FromStr for Prompt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unrecognized prompt text: {s:?}"));
        let rest = s.trim().strip_prefix("a ").ok_or_else(bad)?;
        let (density_word, rest) = rest.split_once(' ').ok_or_else(bad)?;
        let (register_word, rest) = rest.split_once(' ').ok_or_else(bad)?;
        let rest = rest.strip_prefix("melody in ").ok_or_else(bad)?;
        let (root_name, mode_word) = rest.split_once(' ').ok_or_else(bad)?;

        let density = *Density::ALL
            .iter()
            .find(|d| d.word() == density_word)
            .ok_or_else(bad)?;
        let register = *Register::ALL
            .iter()
            .find(|r| r.word() == register_word)
            .ok_or_else(bad)?;
        let root = PITCH_NAMES
            .iter()
            .position(|&n| n == root_name)
            .ok_or_else(bad)? as u8;
        let mode = *Mode::ALL
            .iter()
            .find(|m| m.word() == mode_word)
            .ok_or_else(bad)?;
        Ok(Prompt::new(root, mode, density, register))
    }
}

impl Prompt {
    /// Parse the structured form `ROOT,MODE,DENSITY,REGISTER`, e.g.
    /// `C,MAJOR,MED,MID` or `(C, MAJOR, MED, MID)`.
    pub fn parse_structured(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unrecognized structured prompt: {s:?}"));
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        let [root, mode, density, register] = parts.as_slice() else {
            return Err(bad());
        };
        let root = PITCH_NAMES.iter().position(|n| n == root).ok_or_else(bad)? as u8;
        let field = |v: &str| serde_json::Value::String(v.to_string());
        Ok(Prompt::new(
            root,
            serde_json::from_value(field(mode)).map_err(|_| bad())?,
            serde_json::from_value(field(density)).map_err(|_| bad())?,
            serde_json::from_value(field(register)).map_err(|_| bad())?,
        ))
    }
}

/// Target feature vector `(1.0, d*, r*)` for a prompt.
pub fn prompt_features(prompt: &Prompt) -> [f64; 3] {
    [1.0, prompt.density.target(), prompt.register.target()]
}

/// A prompt plus exactly [`CLIP_LEN`] action tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Clip {
    pub prompt: Prompt,
    tokens: Vec<Token>,
}

impl Clip {
    pub fn new(prompt: Prompt, tokens: Vec<Token>) -> Result<Self> {
        if tokens.len() != CLIP_LEN {
            return Err(Error::MalformedClip {
                expected: CLIP_LEN,
                got: tokens.len(),
            });
        }
        if let Some(pad) = tokens.iter().find(|t| !t.is_action()) {
            return Err(Error::TokenId(pad.id()));
        }
        Ok(Clip { prompt, tokens })
    }

    pub fn from_ids(prompt: Prompt, ids: &[u32]) -> Result<Self> {
        let tokens = ids
            .iter()
            .map(|&id| Token::from_id(id))
            .collect::<Result<Vec<_>>>()?;
        Clip::new(prompt, tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id()).collect()
    }
}

/// JSON-lines record for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub prompt: Prompt,
    pub tokens: Vec<u32>,
}

impl From<&Clip> for ClipRecord {
    fn from(clip: &Clip) -> Self {
        ClipRecord {
            prompt: clip.prompt,
            tokens: clip.ids(),
        }
    }
}

impl TryFrom<ClipRecord> for Clip {
    type Error = Error;

    fn try_from(rec: ClipRecord) -> Result<Self> {
        Clip::from_ids(rec.prompt, &rec.tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DanglingHold,
    ExcessRepeat,
    ExcessLeap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrammarViolation {
    pub position: usize,
    pub kind: ViolationKind,
}

/// Grammar check for a full clip-length token sequence.
pub fn validate_clip(tokens: &[Token]) -> Result<Vec<GrammarViolation>> {
    if tokens.len() != CLIP_LEN {
        return Err(Error::MalformedClip {
            expected: CLIP_LEN,
            got: tokens.len(),
        });
    }
    Ok(scan_violations(tokens))
}

/// Violations of any-length sequence, sorted by position.
pub(crate) fn scan_violations(tokens: &[Token]) -> Vec<GrammarViolation> {
    let mut out = Vec::new();
    let mut prev_onset: Option<u8> = None;
    let mut run = 0usize;
    for (i, &tok) in tokens.iter().enumerate() {
        match tok {
            Token::Hold => {
                let continues = i > 0 && matches!(tokens[i - 1], Token::Note(_) | Token::Hold);
                if !continues {
                    out.push(GrammarViolation {
                        position: i,
                        kind: ViolationKind::DanglingHold,
                    });
                }
            }
            Token::Note(p) => {
                if let Some(q) = prev_onset {
                    if q == p {
                        run += 1;
                    } else {
                        run = 1;
                    }
                    if q.abs_diff(p) > MAX_LEAP {
                        out.push(GrammarViolation {
                            position: i,
                            kind: ViolationKind::ExcessLeap,
                        });
                    }
                } else {
                    run = 1;
                }
                if run > MAX_REPEAT_RUN {
                    out.push(GrammarViolation {
                        position: i,
                        kind: ViolationKind::ExcessRepeat,
                    });
                }
                prev_onset = Some(p);
            }
            Token::Rest | Token::Pad => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipFeatures {
    pub in_scale_ratio: f64,
    pub density: f64,
    pub register: f64,
}

impl ClipFeatures {
    pub fn as_array(&self) -> [f64; 3] {
        [self.in_scale_ratio, self.density, self.register]
    }
}

/// Per-step flag: the step sounds a note (an onset, or a hold chained to one).
pub fn sounding_mask(tokens: &[Token]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(tokens.len());
    let mut in_note = false;
    for &tok in tokens {
        in_note = match tok {
            Token::Note(_) => true,
            Token::Hold => in_note,
            Token::Rest | Token::Pad => false,
        };
        mask.push(in_note);
    }
    mask
}

pub fn extract_features(clip: &Clip, scale: &Scale) -> ClipFeatures {
    features_in_range(clip.tokens(), 0..clip.tokens().len(), scale)
}

/// Features of `tokens[range]`, with note continuity resolved against the full sequence.
pub fn features_in_range(tokens: &[Token], range: Range<usize>, scale: &Scale) -> ClipFeatures {
    let mask = sounding_mask(tokens);
    let steps = range.len().max(1) as f64;
    let sounding = mask[range.clone()].iter().filter(|&&m| m).count();

    let mut notes = 0usize;
    let mut in_scale = 0usize;
    let mut pitch_sum = 0.0;
    for p in tokens[range].iter().filter_map(|t| t.pitch()) {
        notes += 1;
        if scale.contains_pitch(p) {
            in_scale += 1;
        }
        pitch_sum += f64::from(p) / (N_PITCHES - 1) as f64;
    }
    let (in_scale_ratio, register) = if notes == 0 {
        (0.0, 0.5)
    } else {
        (in_scale as f64 / notes as f64, pitch_sum / notes as f64)
    };
    ClipFeatures {
        in_scale_ratio,
        density: sounding as f64 / steps,
        register,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset: usize,
    pub duration: usize,
    pub midi: u8,
}

/// Run-length decoding into note events. Dangling holds render as rests.
pub fn to_note_events(clip: &Clip) -> Vec<NoteEvent> {
    tokens_to_events(clip.tokens())
}

pub fn tokens_to_events(tokens: &[Token]) -> Vec<NoteEvent> {
    let mut events: Vec<NoteEvent> = Vec::new();
    let mut open = false;
    for (i, &tok) in tokens.iter().enumerate() {
        match tok {
            Token::Note(p) => {
                events.push(NoteEvent {
                    onset: i,
                    duration: 1,
                    midi: BASE_MIDI + p,
                });
                open = true;
            }
            Token::Hold if open => {
                if let Some(ev) = events.last_mut() {
                    ev.duration += 1;
                }
            }
            _ => open = false,
        }
    }
    events
}

/// Inverse of [`tokens_to_events`] for violation-free sequences.
pub fn events_to_tokens(events: &[NoteEvent], len: usize) -> Vec<Token> {
    let mut tokens = vec![Token::Rest; len];
    for ev in events {
        if ev.onset >= len {
            continue;
        }
        tokens[ev.onset] = Token::Note(ev.midi - BASE_MIDI);
        for t in tokens
            .iter_mut()
            .take((ev.onset + ev.duration).min(len))
            .skip(ev.onset + 1)
        {
            *t = Token::Hold;
        }
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn padded(prefix: &[Token]) -> Vec<Token> {
        let mut v = prefix.to_vec();
        v.resize(CLIP_LEN, Token::Rest);
        v
    }

    #[test]
    fn structured_prompt_parses() {
        let p = Prompt::parse_structured("(C, MAJOR, MED, MID)").unwrap();
        assert_eq!(p, Prompt::new(0, Mode::Major, Density::Med, Register::Mid));
        assert_eq!(Prompt::parse_structured("C,MAJOR,MED,MID").unwrap(), p);
        assert!(Prompt::parse_structured("H,MAJOR,MED,MID").is_err());
        assert!(Prompt::parse_structured("C,MAJOR,MED").is_err());
    }

    #[test]
    fn legal_clip_has_no_violations() {
        let toks = padded(&[Token::Note(5), Token::Hold, Token::Hold, Token::Rest]);
        assert!(validate_clip(&toks).unwrap().is_empty());
    }

    #[test]
    fn leading_hold_dangles() {
        let toks = padded(&[Token::Hold, Token::Rest]);
        assert_eq!(
            validate_clip(&toks).unwrap(),
            vec![GrammarViolation {
                position: 0,
                kind: ViolationKind::DanglingHold
            }]
        );
    }

    #[test]
    fn six_repeated_onsets_give_two_violations() {
        let toks = padded(&[Token::Note(3); 6]);
        let v = validate_clip(&toks).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|x| x.kind == ViolationKind::ExcessRepeat));
        assert_eq!(v[0].position, 4);
        assert_eq!(v[1].position, 5);
    }

    #[test]
    fn leap_over_octave_flagged() {
        let toks = padded(&[Token::Note(0), Token::Rest, Token::Note(13), Token::Note(0)]);
        let v = validate_clip(&toks).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|x| x.kind == ViolationKind::ExcessLeap));
        let ok = padded(&[Token::Note(0), Token::Note(12)]);
        assert!(validate_clip(&ok).unwrap().is_empty());
    }

    #[test]
    fn wrong_length_is_malformed() {
        assert!(matches!(
            validate_clip(&[Token::Rest; 10]),
            Err(Error::MalformedClip { got: 10, .. })
        ));
    }

    #[test]
    fn all_rest_features_use_convention() {
        let clip = Clip::new(Prompt::from_index(0), vec![Token::Rest; CLIP_LEN]).unwrap();
        let f = extract_features(&clip, &Scale::from_pitch_classes(&[0]));
        assert_eq!(f.as_array(), [0.0, 0.0, 0.5]);
    }

    #[test]
    fn single_pitch_saturates() {
        let clip = Clip::new(Prompt::from_index(0), vec![Token::Note(0); CLIP_LEN]).unwrap();
        let f = extract_features(&clip, &Scale::from_pitch_classes(&[0]));
        assert_eq!(f.as_array(), [1.0, 1.0, 0.0]);
    }

    #[test]
    fn note_event_from_hold_chain() {
        let clip = Clip::new(
            Prompt::from_index(0),
            padded(&[Token::Note(12), Token::Hold, Token::Hold, Token::Rest]),
        )
        .unwrap();
        assert_eq!(
            to_note_events(&clip),
            vec![NoteEvent {
                onset: 0,
                duration: 3,
                midi: 60
            }]
        );
        let silent = Clip::new(Prompt::from_index(0), vec![Token::Rest; CLIP_LEN]).unwrap();
        assert!(to_note_events(&silent).is_empty());
    }

    #[test]
    fn dangling_hold_renders_as_rest() {
        let toks = padded(&[Token::Rest, Token::Hold, Token::Note(2), Token::Hold]);
        let ev = tokens_to_events(&toks);
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].onset, ev[0].duration), (2, 2));
    }

    #[test]
    fn prompt_targets() {
        let c = Prompt::new(0, Mode::Major, Density::Med, Register::Mid);
        assert_eq!(prompt_features(&c), [1.0, 0.5, 0.5]);
        let a = Prompt::new(9, Mode::NaturalMinor, Density::High, Register::High);
        assert_eq!(prompt_features(&a), [1.0, 0.8, 0.75]);
        let fs = Prompt::new(6, Mode::PentatonicMajor, Density::Low, Register::Low);
        assert_eq!(prompt_features(&fs), [1.0, 0.25, 0.25]);
    }

    #[test]
    fn prompt_text_and_index_are_bijective() {
        let mut seen = std::collections::HashSet::new();
        for (i, p) in Prompt::all().enumerate() {
            assert_eq!(p.index(), i);
            let text = p.text();
            assert!(seen.insert(text.clone()));
            assert_eq!(text.parse::<Prompt>().unwrap(), p);
            let oh = p.one_hot();
            assert_eq!(oh.iter().filter(|&&x| x == 1.0).count(), 4);
            assert_eq!(oh.iter().sum::<f64>(), 4.0);
        }
        assert_eq!(seen.len(), 324);
        assert_eq!(
            Prompt::new(0, Mode::Major, Density::Low, Register::Low).text(),
            "a sparse low-register melody in C major"
        );
        assert!("a loud melody".parse::<Prompt>().is_err());
    }

    #[test]
    fn clip_record_json_shape() {
        let clip = Clip::new(
            Prompt::new(2, Mode::PentatonicMajor, Density::High, Register::Low),
            padded(&[Token::Note(1), Token::Hold]),
        )
        .unwrap();
        let json = serde_json::to_string(&ClipRecord::from(&clip)).unwrap();
        assert!(json.starts_with(
            r#"{"prompt":{"root":2,"mode":"PENTATONIC_MAJOR","density":"HIGH","register":"LOW"},"tokens":[1,24,25"#
        ));
        let back: Clip = serde_json::from_str::<ClipRecord>(&json)
            .unwrap()
            .try_into()
            .unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn pad_rejected_in_clip() {
        let mut toks = vec![Token::Rest; CLIP_LEN];
        toks[3] = Token::Pad;
        assert!(Clip::new(Prompt::from_index(0), toks).is_err());
        assert!(Token::from_id(27).is_err());
    }
}
