//! Conversion of heterogeneous annotations into prompt + label-list samples,
//! and the JSON-lines sample file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use efh_numcore::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::boxes::BoxCxCyWh;
use crate::training::GroundTruth;

/// Prompt used when the joined label list does not fit.
pub const FALLBACK_PROMPT: &str = "Detect all objects in the image";

/// Statement and question templates; `{}` receives the joined labels.
pub const OD_TEMPLATES: &[&str] = &[
    "Detect objects in {}",
    "Where is the location of {}",
    "Find {}",
    "Locate {} in the image",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "od")]
    Od,
    #[serde(rename = "grounding")]
    Grounding,
    #[serde(rename = "hoi")]
    Hoi,
    #[serde(rename = "phrase-grounding")]
    PhraseGrounding,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "od" => Ok(Self::Od),
            "grounding" => Ok(Self::Grounding),
            "hoi" => Ok(Self::Hoi),
            "phrase-grounding" => Ok(Self::PhraseGrounding),
            other => Err(Error::arg(format!("unknown task kind `{other}`"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Od => "od",
            Self::Grounding => "grounding",
            Self::Hoi => "hoi",
            Self::PhraseGrounding => "phrase-grounding",
        })
    }
}

/// One line of a sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSample {
    pub image: String,
    pub prompt: String,
    pub labels: Vec<String>,
    pub boxes: Vec<BoxCxCyWh>,
    pub label_ids: Vec<usize>,
    pub task: TaskKind,
}

impl TaskSample {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::arg("sample has no labels"));
        }
        if self.prompt.trim().is_empty() {
            return Err(Error::arg("sample prompt is empty"));
        }
        self.ground_truth().map(|_| ())
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        if let Some(&bad) = self.label_ids.iter().find(|&&l| l >= self.labels.len()) {
            return Err(Error::arg(format!(
                "label id {bad} out of range for {} labels",
                self.labels.len()
            )));
        }
        GroundTruth::new(&self.image, self.boxes.clone(), self.label_ids.clone())
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<TaskSample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let s: TaskSample =
                serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            s.validate()
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            Ok(s)
        })
        .collect()
}

pub fn write_jsonl(path: impl AsRef<Path>, samples: &[TaskSample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawObject {
    pub name: String,
    pub bbox: BoxCxCyWh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub subject: String,
    pub verb: String,
    pub object: String,
    pub subject_bbox: BoxCxCyWh,
    pub object_bbox: BoxCxCyWh,
}

/// Source annotation before conversion. Detection and phrase data use
/// `objects`; grounding adds a `caption`; HOI data uses `interactions`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RawAnnotation {
    pub image: String,
    pub objects: Vec<RawObject>,
    pub caption: Option<String>,
    pub interactions: Vec<Interaction>,
    /// Full label list for detection data; defaults to the object names.
    pub vocabulary: Vec<String>,
}

fn present_participle(verb: &str) -> String {
    match verb.strip_suffix('e') {
        Some(stem) if !verb.ends_with("ee") && !stem.is_empty() => format!("{stem}ing"),
        _ => format!("{verb}ing"),
    }
}

fn past_participle(verb: &str) -> String {
    if verb.ends_with('e') {
        format!("{verb}d")
    } else {
        format!("{verb}ed")
    }
}

/// Subject and object phrases of an interaction as adjective + noun forms:
/// `"<verb>ing <subject>"` and `"<verb>ed <object>"`. The inflection is a
/// plain suffix rule, so `ride` gives `riding` and `rided`.
pub fn hoi_phrases(i: &Interaction) -> (String, String) {
    (
        format!("{} {}", present_participle(&i.verb), i.subject),
        format!("{} {}", past_participle(&i.verb), i.object),
    )
}

fn index_of(labels: &mut Vec<String>, name: &str) -> usize {
    match labels.iter().position(|l| l == name) {
        Some(i) => i,
        None => {
            labels.push(name.to_string());
            labels.len() - 1
        }
    }
}

fn template_prompt(labels: &[String], templates: &[&str], rng: &mut Rng, max_len: usize) -> String {
    let joined = labels.join(", ");
    let t = templates[rng.random_range(0..templates.len())];
    let prompt = t.replacen("{}", &joined, 1);
    if prompt.len() > max_len {
        FALLBACK_PROMPT.to_string()
    } else {
        prompt
    }
}

/// Converts an annotation into a prompt, a label list and ground truth.
/// Prompts never exceed `max_len` bytes (`max_len` must fit the fallback).
pub fn convert_task(
    raw: &RawAnnotation,
    kind: &str,
    templates: &[&str],
    rng: &mut Rng,
    max_len: usize,
) -> Result<TaskSample> {
    let kind: TaskKind = kind.parse()?;
    if max_len < FALLBACK_PROMPT.len() {
        return Err(Error::arg(format!("max prompt length {max_len} cannot hold the fallback prompt")));
    }
    if templates.is_empty() {
        return Err(Error::arg("no prompt templates"));
    }
    let mut labels: Vec<String> = Vec::new();
    let mut boxes = Vec::new();
    let mut label_ids = Vec::new();
    let prompt = match kind {
        TaskKind::Od | TaskKind::PhraseGrounding => {
            labels = raw.vocabulary.clone();
            for o in &raw.objects {
                label_ids.push(index_of(&mut labels, &o.name));
                boxes.push(o.bbox);
            }
            template_prompt(&labels, templates, rng, max_len)
        }
        TaskKind::Grounding => {
            let caption = raw
                .caption
                .as_deref()
                .filter(|c| !c.trim().is_empty())
                .ok_or_else(|| Error::arg("grounding annotation has no caption"))?;
            for o in &raw.objects {
                label_ids.push(index_of(&mut labels, &o.name));
                boxes.push(o.bbox);
            }
            if caption.len() > max_len {
                FALLBACK_PROMPT.to_string()
            } else {
                caption.to_string()
            }
        }
        TaskKind::Hoi => {
            for i in &raw.interactions {
                let (sp, op) = hoi_phrases(i);
                label_ids.push(index_of(&mut labels, &sp));
                boxes.push(i.subject_bbox);
                label_ids.push(index_of(&mut labels, &op));
                boxes.push(i.object_bbox);
            }
            template_prompt(&labels, templates, rng, max_len)
        }
    };
    let sample = TaskSample {
        image: raw.image.clone(),
        prompt,
        labels,
        boxes,
        label_ids,
        task: kind,
    };
    sample.validate()?;
    Ok(sample)
}
