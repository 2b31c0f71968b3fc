//! Versioned prompt templates. Built-in copies are compiled in; a directory
//! of `<name>.v<N>.txt` files can override them at runtime.

use std::collections::BTreeMap;
use std::path::Path;

use crate::llm_gateway::{ChatMessage, Role};

use super::AgentError;

pub const EXTRACT_SPEC: &str = "extract_spec";
pub const REPAIR_SPEC: &str = "repair_spec";
pub const GENERATE_SCRIPT: &str = "generate_script";
pub const DESIGN_TESTS: &str = "design_tests";
pub const INTERPRET: &str = "interpret";
pub const REPAIR_INTERPRETATION: &str = "repair_interpretation";

const BUILTIN: [(&str, u32, &str); 6] = [
    (EXTRACT_SPEC, 1, include_str!("../../prompts/extract_spec.v1.txt")),
    (REPAIR_SPEC, 1, include_str!("../../prompts/repair_spec.v1.txt")),
    (GENERATE_SCRIPT, 1, include_str!("../../prompts/generate_script.v1.txt")),
    (DESIGN_TESTS, 1, include_str!("../../prompts/design_tests.v1.txt")),
    (INTERPRET, 1, include_str!("../../prompts/interpret.v1.txt")),
    (REPAIR_INTERPRETATION, 1, include_str!("../../prompts/repair_interpretation.v1.txt")),
];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    pub text: String,
}

impl PromptTemplate {
    /// Splits on `[system]` / `[user]` / `[assistant]` marker lines and
    /// substitutes `{{key}}` placeholders. Every placeholder must be bound.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<Vec<ChatMessage>, AgentError> {
        let mut text = self.text.clone();
        for (k, v) in vars {
            text = text.replace(&format!("{{{{{k}}}}}"), v);
        }
        if let Some(start) = text.find("{{") {
            let rest = &text[start + 2..];
            let name = rest.split("}}").next().unwrap_or(rest);
            return Err(AgentError::Prompt(format!("template {} leaves {{{{{name}}}}} unbound", self.name)));
        }
        let mut messages: Vec<ChatMessage> = Vec::new();
        let mut role: Option<Role> = None;
        let mut buf = String::new();
        let flush = |role: Option<Role>, buf: &mut String, out: &mut Vec<ChatMessage>| {
            if let Some(r) = role {
                let content = buf.trim().to_string();
                if !content.is_empty() {
                    out.push(ChatMessage { role: r, content });
                }
            }
            buf.clear();
        };
        for line in text.lines() {
            let marker = match line.trim() {
                "[system]" => Some(Role::System),
                "[user]" => Some(Role::User),
                "[assistant]" => Some(Role::Assistant),
                _ => None,
            };
            if let Some(r) = marker {
                flush(role, &mut buf, &mut messages);
                role = Some(r);
            } else {
                buf.push_str(line);
                buf.push('\n');
            }
        }
        flush(role, &mut buf, &mut messages);
        if messages.is_empty() {
            return Err(AgentError::Prompt(format!("template {} has no messages", self.name)));
        }
        Ok(messages)
    }
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(name, version, text)| {
                (name.to_string(), PromptTemplate { name: name.to_string(), version: *version, text: text.to_string() })
            })
            .collect();
        Self { templates }
    }

    /// Built-ins overridden by `<name>.v<N>.txt` files in `dir`; the highest
    /// version of each name wins. Unknown names are ignored.
    pub fn with_overrides(dir: &Path) -> Result<Self, AgentError> {
        let mut lib = Self::builtin();
        let entries = std::fs::read_dir(dir).map_err(|e| AgentError::Prompt(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let entry = entry.map_err(|e| AgentError::Prompt(e.to_string()))?;
            let file = entry.file_name().to_string_lossy().into_owned();
            let Some(stem) = file.strip_suffix(".txt") else { continue };
            let Some((name, ver)) = stem.rsplit_once(".v") else { continue };
            let Ok(version) = ver.parse::<u32>() else { continue };
            let Some(current) = lib.templates.get(name) else { continue };
            if version < current.version {
                continue;
            }
            let text = std::fs::read_to_string(entry.path()).map_err(|e| AgentError::Prompt(format!("{file}: {e}")))?;
            lib.templates.insert(name.to_string(), PromptTemplate { name: name.to_string(), version, text });
        }
        Ok(lib)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, AgentError> {
        self.templates.get(name).ok_or_else(|| AgentError::Prompt(format!("no template named {name}")))
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<Vec<ChatMessage>, AgentError> {
        self.get(name)?.render(vars)
    }

    /// `name -> version` for every loaded template.
    pub fn versions(&self) -> BTreeMap<String, u32> {
        self.templates.iter().map(|(k, t)| (k.clone(), t.version)).collect()
    }
}
