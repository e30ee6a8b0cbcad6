//! Scene grammar: attribute sets, captions, question/answer templates and a
//! template parser that maps text back to attributes.

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const ACTIONS: [&str; 7] = [
    "reading", "drinking", "eating", "cooking", "cleaning", "sleeping", "walking",
];
pub const POSTURES: [&str; 3] = ["standing", "sitting", "lying"];
pub const LOCATIONS: [&str; 6] = ["kitchen", "bedroom", "living room", "doorway", "bathroom", "hallway"];
/// Things a person does before or after the main action.
pub const ACTIVITIES: [&str; 8] = [
    "opening the door",
    "turning on the light",
    "looking at a phone",
    "putting on shoes",
    "closing the window",
    "laughing",
    "sneezing",
    "taking off a jacket",
];
pub const AUDIO: [&str; 4] = ["talking", "silence", "music", "dog barking"];
pub const ACTOR_COUNTS: [u8; 2] = [1, 2];

pub const ALL_PROPS: [&str; 17] = [
    "book",
    "magazine",
    "newspaper",
    "glass of water",
    "cup of coffee",
    "bottle of juice",
    "sandwich",
    "apple",
    "bowl of soup",
    "pan",
    "pot",
    "towel",
    "broom",
    "pillow",
    "blanket",
    "bag",
    "phone",
];

/// Props that fit an action.
pub fn props_for(action: &str) -> &'static [&'static str] {
    match action {
        "reading" => &ALL_PROPS[0..3],
        "drinking" => &ALL_PROPS[3..6],
        "eating" => &ALL_PROPS[6..9],
        "cooking" => &ALL_PROPS[9..11],
        "cleaning" => &ALL_PROPS[11..13],
        "sleeping" => &ALL_PROPS[13..15],
        "walking" => &ALL_PROPS[15..17],
        _ => &[],
    }
}

/// Whether the caption joins action and prop with "with".
fn uses_with(action: &str) -> bool {
    matches!(action, "cooking" | "cleaning" | "sleeping" | "walking")
}

fn article(noun: &str) -> &'static str {
    if noun.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn with_article(noun: &str) -> String {
    format!("{} {noun}", article(noun))
}

/// Postures an action allows.
pub fn postures_for(action: &str) -> &'static [&'static str] {
    match action {
        "sleeping" => &POSTURES[2..3],
        "walking" | "cooking" => &POSTURES[0..1],
        _ => &POSTURES,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    ActorCount,
    Action,
    Posture,
    Location,
    Prop,
    PreAction,
    PostAction,
    Audio,
}

impl Attribute {
    pub const ALL: [Attribute; 8] = [
        Self::ActorCount,
        Self::Action,
        Self::Posture,
        Self::Location,
        Self::Prop,
        Self::PreAction,
        Self::PostAction,
        Self::Audio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ActorCount => "actor_count",
            Self::Action => "action",
            Self::Posture => "posture",
            Self::Location => "location",
            Self::Prop => "prop",
            Self::PreAction => "pre_action",
            Self::PostAction => "post_action",
            Self::Audio => "audio",
        }
    }

    /// Every value the attribute can take, as stored in a scene.
    pub fn values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::ActorCount => return ACTOR_COUNTS.iter().map(|c| c.to_string()).collect(),
            Self::Action => &ACTIONS,
            Self::Posture => &POSTURES,
            Self::Location => &LOCATIONS,
            Self::Prop => &ALL_PROPS,
            Self::PreAction | Self::PostAction => &ACTIVITIES,
            Self::Audio => &AUDIO,
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneSpec {
    pub actor_count: u8,
    pub action: String,
    pub posture: String,
    pub location: String,
    pub prop: String,
    pub pre_action: String,
    pub post_action: String,
    pub audio: String,
}

impl SceneSpec {
    pub fn value(&self, attr: Attribute) -> String {
        match attr {
            Attribute::ActorCount => self.actor_count.to_string(),
            Attribute::Action => self.action.clone(),
            Attribute::Posture => self.posture.clone(),
            Attribute::Location => self.location.clone(),
            Attribute::Prop => self.prop.clone(),
            Attribute::PreAction => self.pre_action.clone(),
            Attribute::PostAction => self.post_action.clone(),
            Attribute::Audio => self.audio.clone(),
        }
    }

    pub fn shared_attributes(&self, other: &SceneSpec) -> usize {
        Attribute::ALL
            .iter()
            .filter(|&&a| self.value(a) == other.value(a))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: &str| Err(Error::invalid(format!("scene has invalid {what} `{v}`")));
        if !ACTOR_COUNTS.contains(&self.actor_count) {
            return bad("actor_count", &self.actor_count.to_string());
        }
        if !ACTIONS.contains(&self.action.as_str()) {
            return bad("action", &self.action);
        }
        if !postures_for(&self.action).contains(&self.posture.as_str()) {
            return bad("posture", &self.posture);
        }
        if !LOCATIONS.contains(&self.location.as_str()) {
            return bad("location", &self.location);
        }
        if !props_for(&self.action).contains(&self.prop.as_str()) {
            return bad("prop", &self.prop);
        }
        if !ACTIVITIES.contains(&self.pre_action.as_str()) {
            return bad("pre_action", &self.pre_action);
        }
        if !ACTIVITIES.contains(&self.post_action.as_str()) || self.post_action == self.pre_action {
            return bad("post_action", &self.post_action);
        }
        if !AUDIO.contains(&self.audio.as_str()) {
            return bad("audio", &self.audio);
        }
        Ok(())
    }
}

fn pick<R: Rng + ?Sized>(values: &[&str], rng: &mut R) -> String {
    values.choose(rng).expect("non-empty value set").to_string()
}

/// Uniform draw per attribute subject to the action's posture and prop
/// constraints, with distinct pre and post activities.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R) -> SceneSpec {
    let actor_count = *ACTOR_COUNTS.choose(rng).expect("non-empty");
    let action = pick(&ACTIONS, rng);
    let posture = pick(postures_for(&action), rng);
    let location = pick(&LOCATIONS, rng);
    let prop = pick(props_for(&action), rng);
    let pre_action = pick(&ACTIVITIES, rng);
    let post_action = loop {
        let p = pick(&ACTIVITIES, rng);
        if p != pre_action {
            break p;
        }
    };
    let audio = pick(&AUDIO, rng);
    SceneSpec {
        actor_count,
        action,
        posture,
        location,
        prop,
        pre_action,
        post_action,
        audio,
    }
}

/// Resamples the attributes a near-duplicate sibling does not keep. Action
/// and prop always stay; location and actor count stay with probability
/// `keep`.
pub fn sample_sibling<R: Rng + ?Sized>(base: &SceneSpec, keep: f64, rng: &mut R) -> SceneSpec {
    let mut s = sample_scene(rng);
    s.action = base.action.clone();
    s.prop = base.prop.clone();
    s.posture = pick(postures_for(&s.action), rng);
    if rng.random_bool(keep) {
        s.location = base.location.clone();
    }
    if rng.random_bool(keep) {
        s.actor_count = base.actor_count;
    }
    s
}

fn subject(actor_count: u8) -> &'static str {
    if actor_count == 1 {
        "a man"
    } else {
        "two people"
    }
}

fn prop_phrase(action: &str, prop: &str) -> String {
    if uses_with(action) {
        format!("with {}", with_article(prop))
    } else {
        with_article(prop)
    }
}

pub fn gen_caption(scene: &SceneSpec) -> String {
    format!(
        "{} {} {} in the {}",
        subject(scene.actor_count),
        scene.action,
        prop_phrase(&scene.action, &scene.prop),
        scene.location
    )
}

/// The attributes a caption reveals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionParse {
    pub actor_count: u8,
    pub action: String,
    pub prop: String,
    pub location: String,
}

pub fn parse_caption(text: &str) -> Option<CaptionParse> {
    let target = tokenize(text);
    for &actor_count in &ACTOR_COUNTS {
        for action in ACTIONS {
            for prop in props_for(action) {
                for location in LOCATIONS {
                    let scene_caption = format!(
                        "{} {action} {} in the {location}",
                        subject(actor_count),
                        prop_phrase(action, prop)
                    );
                    if tokenize(&scene_caption) == target {
                        return Some(CaptionParse {
                            actor_count,
                            action: action.to_string(),
                            prop: prop.to_string(),
                            location: location.to_string(),
                        });
                    }
                }
            }
        }
    }
    None
}

/// One question template and the attribute it asks about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionTemplate {
    HowMany,
    Doing,
    Posture,
    Where,
    Holding,
    AtStart,
    Before,
    AtEnd,
    After,
    Sound,
}

impl QuestionTemplate {
    pub const ALL: [QuestionTemplate; 10] = [
        Self::HowMany,
        Self::Doing,
        Self::Posture,
        Self::Where,
        Self::Holding,
        Self::AtStart,
        Self::Before,
        Self::AtEnd,
        Self::After,
        Self::Sound,
    ];

    pub fn attribute(self) -> Attribute {
        match self {
            Self::HowMany => Attribute::ActorCount,
            Self::Doing => Attribute::Action,
            Self::Posture => Attribute::Posture,
            Self::Where => Attribute::Location,
            Self::Holding => Attribute::Prop,
            Self::AtStart | Self::Before => Attribute::PreAction,
            Self::AtEnd | Self::After => Attribute::PostAction,
            Self::Sound => Attribute::Audio,
        }
    }

    fn has_slot(self) -> bool {
        matches!(self, Self::Before | Self::After)
    }

    /// Question text; slotted templates name `action`.
    pub fn question(self, action: &str) -> String {
        match self {
            Self::HowMany => "how many people are in the video ?".into(),
            Self::Doing => "what is the person doing ?".into(),
            Self::Posture => "is the person standing , sitting or lying down ?".into(),
            Self::Where => "where is the video taking place ?".into(),
            Self::Holding => "what is the person holding ?".into(),
            Self::AtStart => "what was the person doing at the start of the video ?".into(),
            Self::Before => format!("what was the person doing before {action} ?"),
            Self::AtEnd => "what does the person do at the end of the video ?".into(),
            Self::After => format!("what does the person do after {action} ?"),
            Self::Sound => "is there any sound in the video ?".into(),
        }
    }

    /// Answer text for an attribute value.
    pub fn answer_for_value(self, value: &str) -> String {
        match self.attribute() {
            Attribute::ActorCount => if value == "1" { "one person" } else { "two people" }.into(),
            Attribute::Action => format!("they are {value}"),
            Attribute::Posture => if value == "lying" { "lying down" } else { value }.into(),
            Attribute::Location => format!("in the {value}"),
            Attribute::Prop => with_article(value),
            Attribute::PreAction | Attribute::PostAction => value.into(),
            Attribute::Audio => match value {
                "talking" => "yes , someone is talking",
                "silence" => "no , it is silent",
                "music" => "yes , there is music",
                _ => "yes , a dog is barking",
            }
            .into(),
        }
    }

    pub fn answer(self, scene: &SceneSpec) -> String {
        self.answer_for_value(&scene.value(self.attribute()))
    }

    /// Attribute value named by an answer, if it has this template's form.
    pub fn parse_answer(self, text: &str) -> Option<String> {
        let target = tokenize(text);
        self.attribute()
            .values()
            .into_iter()
            .find(|v| tokenize(&self.answer_for_value(v)) == target)
    }
}

/// A question matched against the template grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionParse {
    pub template: QuestionTemplate,
    /// The action named in a slotted template.
    pub slot: Option<String>,
}

pub fn parse_question(text: &str) -> Option<QuestionParse> {
    parse_question_tokens(&tokenize(text))
}

pub fn parse_question_tokens<S: AsRef<str>>(tokens: &[S]) -> Option<QuestionParse> {
    let tokens: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    for template in QuestionTemplate::ALL {
        if template.has_slot() {
            for action in ACTIONS {
                if tokenize(&template.question(action)) == tokens {
                    return Some(QuestionParse {
                        template,
                        slot: Some(action.to_string()),
                    });
                }
            }
        } else if tokenize(&template.question("")) == tokens {
            return Some(QuestionParse { template, slot: None });
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub q: String,
    pub a: String,
}

/// Template order: one template per attribute in shuffled attribute order,
/// then the remaining templates shuffled.
pub fn template_order<R: Rng + ?Sized>(rng: &mut R) -> Vec<QuestionTemplate> {
    let mut attrs = Attribute::ALL.to_vec();
    attrs.shuffle(rng);
    let mut first = Vec::with_capacity(QuestionTemplate::ALL.len());
    let mut rest: Vec<QuestionTemplate> = Vec::new();
    for attr in attrs {
        let candidates: Vec<QuestionTemplate> = QuestionTemplate::ALL
            .into_iter()
            .filter(|t| t.attribute() == attr)
            .collect();
        let chosen = *candidates.choose(rng).expect("every attribute has a template");
        first.push(chosen);
        rest.extend(candidates.into_iter().filter(|&t| t != chosen));
    }
    rest.shuffle(rng);
    first.extend(rest);
    first
}

pub fn gen_dialog<R: Rng + ?Sized>(scene: &SceneSpec, rounds: usize, rng: &mut R) -> Result<Vec<QaPair>> {
    if rounds > QuestionTemplate::ALL.len() {
        return Err(Error::invalid(format!(
            "{rounds} rounds requested but the grammar has {} question templates",
            QuestionTemplate::ALL.len()
        )));
    }
    Ok(template_order(rng)
        .into_iter()
        .take(rounds)
        .map(|t| QaPair {
            q: t.question(&scene.action),
            a: t.answer(scene),
        })
        .collect())
}

pub const UNKNOWN_ANSWER: &str = "i do not know";

/// Answers a question as the dialog generator would for `scene`.
pub fn oracle_answer(scene: &SceneSpec, question: &str) -> String {
    match parse_question(question) {
        Some(p) => p.template.answer(scene),
        None => UNKNOWN_ANSWER.to_string(),
    }
}
