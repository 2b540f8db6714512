//! Attributed step guides built from mined flows, and their scrollytelling
//! rendering: one full-viewport section per step, navigated by scrolling.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::miner::parse_step_label;
use crate::trace::{Action, Millis};

pub const MAX_CAPTION_CHARS: usize = 140;
pub const DEFAULT_MAX_STEPS: usize = 15;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShareFlowError {
    #[error("flow has no steps")]
    EmptyFlow,
    #[error("ShareFlow metadata has no author")]
    MissingAuthor,
    #[error("ShareFlow metadata has no task")]
    MissingTask,
    #[error("invalid ShareFlow record: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Author {
    pub participant_id: String,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cue {
    ClickHighlight { target: String },
    InputHighlight { target: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub label: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cue: Option<Cue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareFlow {
    pub id: String,
    pub title: String,
    pub author: Author,
    pub task_id: String,
    pub steps: Vec<Step>,
    pub links: Vec<String>,
    pub created_ts: Millis,
}

/// Metadata needed to turn a mined flow into a ShareFlow.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowMeta {
    pub id: Option<String>,
    pub title: Option<String>,
    pub task_id: String,
    pub task_name: String,
    pub author: Option<Author>,
    /// Resource observed in the expert trace for each step label.
    pub step_links: BTreeMap<String, String>,
    pub created_ts: Millis,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltShareFlow {
    pub flow: ShareFlow,
    pub warnings: Vec<String>,
}

fn humanize(detail: &str) -> String {
    let cleaned: String = detail
        .trim_start_matches(['#', '.', '/'])
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    if words.is_empty() {
        "the page".to_string()
    } else {
        words.join(" ")
    }
}

fn caption_for(label: &str) -> String {
    let (action, detail) = parse_step_label(label);
    let what = humanize(detail);
    let text = match action {
        Some(Action::Navigation) => format!("Open {what}"),
        Some(Action::Scroll) => format!("Scroll through {what}"),
        Some(Action::Click) => format!("Click {what}"),
        Some(Action::Type) => format!("Type into {what}"),
        Some(Action::Select) => format!("Choose an option in {what}"),
        Some(Action::Submit) => format!("Submit {what}"),
        Some(Action::Query) => format!("Search for {what}"),
        _ => humanize(label),
    };
    truncate_chars(&text, MAX_CAPTION_CHARS)
}

fn truncate_chars(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        return s.to_string();
    }
    let mut out: String = s.chars().take(max - 1).collect();
    out.push('…');
    out
}

fn cue_for(label: &str) -> Option<Cue> {
    let (action, detail) = parse_step_label(label);
    if detail.is_empty() || detail.starts_with('/') {
        return None;
    }
    let target = detail.to_string();
    match action? {
        Action::Click | Action::Submit | Action::Select => Some(Cue::ClickHighlight { target }),
        Action::Type => Some(Cue::InputHighlight { target }),
        _ => None,
    }
}

fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

pub fn build_shareflow(flow: &[String], meta: &FlowMeta) -> Result<BuiltShareFlow, ShareFlowError> {
    if flow.is_empty() {
        return Err(ShareFlowError::EmptyFlow);
    }
    let author = meta
        .author
        .clone()
        .filter(|a| !a.participant_id.trim().is_empty())
        .ok_or(ShareFlowError::MissingAuthor)?;
    if meta.task_id.trim().is_empty() {
        return Err(ShareFlowError::MissingTask);
    }
    let mut labels: Vec<&String> = flow.iter().collect();
    labels.dedup();
    let mut warnings = Vec::new();
    let cap = meta.max_steps.unwrap_or(DEFAULT_MAX_STEPS).max(1);
    if labels.len() > cap {
        warnings.push(format!("flow truncated from {} to {cap} steps", labels.len()));
        labels.truncate(cap);
    }
    let steps: Vec<Step> = labels
        .iter()
        .enumerate()
        .map(|(i, label)| Step {
            index: i + 1,
            label: (*label).clone(),
            caption: caption_for(label),
            cue: cue_for(label),
            link: meta.step_links.get(*label).cloned(),
        })
        .collect();
    let mut links: Vec<String> = Vec::new();
    for l in steps.iter().filter_map(|s| s.link.as_ref()) {
        if !links.contains(l) {
            links.push(l.clone());
        }
    }
    let task_name = if meta.task_name.trim().is_empty() {
        &meta.task_id
    } else {
        &meta.task_name
    };
    let title = meta
        .title
        .clone()
        .filter(|t| !t.trim().is_empty())
        .unwrap_or_else(|| format!("How to {task_name}"));
    let id = meta
        .id
        .clone()
        .unwrap_or_else(|| format!("sf-{}-{}", slug(&meta.task_id), slug(&author.participant_id)));
    Ok(BuiltShareFlow {
        flow: ShareFlow {
            id,
            title,
            author,
            task_id: meta.task_id.clone(),
            steps,
            links,
            created_ts: meta.created_ts,
        },
        warnings,
    })
}

impl ShareFlow {
    pub fn to_record(&self) -> String {
        serde_json::to_string_pretty(self).expect("ShareFlow serializes")
    }

    pub fn from_record(text: &str) -> Result<ShareFlow, ShareFlowError> {
        let sf: ShareFlow =
            serde_json::from_str(text).map_err(|e| ShareFlowError::Parse(e.to_string()))?;
        if sf.steps.is_empty() {
            return Err(ShareFlowError::EmptyFlow);
        }
        if sf.author.participant_id.is_empty() {
            return Err(ShareFlowError::MissingAuthor);
        }
        Ok(sf)
    }

    /// Title plus captions, the text the recommender matches page terms against.
    pub fn searchable_text(&self) -> String {
        let mut text = self.title.clone();
        for s in &self.steps {
            text.push(' ');
            text.push_str(&s.caption);
        }
        text
    }
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

const STYLE: &str = "\
html{scroll-snap-type:y mandatory}\
body{margin:0;font-family:system-ui,sans-serif;color:#1d2330;background:#f7f7f4}\
header{min-height:100vh;display:flex;flex-direction:column;justify-content:center;padding:0 10vw;scroll-snap-align:start}\
header h1{font-size:2.4rem;margin:0 0 .5rem}\
.attribution{color:#555}\
section.step{min-height:100vh;display:flex;flex-direction:column;justify-content:center;padding:0 10vw;scroll-snap-align:start;border-top:1px solid #ddd}\
.step-number{font-size:.9rem;letter-spacing:.1em;text-transform:uppercase;color:#888}\
.caption{font-size:1.6rem;margin:.4rem 0 1rem}\
mark.cue{background:#ffe066;padding:.3rem .6rem;border-radius:.3rem;outline:3px solid #f08c00}\
.step-link a{color:#1864ab}\
";

/// Renders a self-contained scrollytelling document. Output depends only on
/// the ShareFlow, so equal inputs give byte-identical documents.
pub fn render_scrollytelling(sf: &ShareFlow) -> Vec<u8> {
    let mut html = String::new();
    let title = escape_html(&sf.title);
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n\
         <meta name=\"viewport\" content=\"width=device-width, initial-scale=1\">\n\
         <title>{title}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n"
    );
    let _ = write!(
        html,
        "<header>\n<h1>{title}</h1>\n<p class=\"attribution\">Shared by {} ({})</p>\n\
         <p class=\"step-count\">{} steps. Scroll down to follow along.</p>\n</header>\n",
        escape_html(&sf.author.display_name),
        escape_html(&sf.author.participant_id),
        sf.steps.len()
    );
    html.push_str("<main>\n");
    for step in &sf.steps {
        let _ = writeln!(
            html,
            "<section class=\"step\" id=\"step-{0}\" data-step=\"{0}\">",
            step.index
        );
        let _ = writeln!(html, "<p class=\"step-number\">Step {}</p>", step.index);
        let _ = writeln!(html, "<p class=\"caption\">{}</p>", escape_html(&step.caption));
        if let Some(cue) = &step.cue {
            let (kind, target) = match cue {
                Cue::ClickHighlight { target } => ("click", target),
                Cue::InputHighlight { target } => ("input", target),
            };
            let _ = writeln!(
                html,
                "<mark class=\"cue cue-{kind}\" data-target=\"{0}\">{0}</mark>",
                escape_html(target)
            );
        }
        if let Some(link) = &step.link {
            let _ = writeln!(
                html,
                "<p class=\"step-link\"><a href=\"{0}\">{0}</a></p>",
                escape_html(link)
            );
        }
        html.push_str("</section>\n");
    }
    html.push_str("</main>\n</body>\n</html>\n");
    html.into_bytes()
}
