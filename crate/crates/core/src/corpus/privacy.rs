use super::Dialogue;

/// Placeholder sentences left where images or voice messages were removed.
pub const DEFAULT_PLACEHOLDERS: [&str; 2] = [
    "The image is not available for privacy concerns",
    "The voice is not available for privacy concerns",
];

/// Drops dialogues whose text contains a removed-media placeholder.
/// Matching is a case-insensitive substring scan over each utterance's
/// space-joined tokens.
#[derive(Clone, Debug)]
pub struct PrivacyFilter {
    needles: Vec<String>,
}

impl Default for PrivacyFilter {
    fn default() -> Self {
        Self::new(DEFAULT_PLACEHOLDERS.iter().copied())
    }
}

impl PrivacyFilter {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let needles = phrases
            .into_iter()
            .map(|p| normalise(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();
        PrivacyFilter { needles }
    }

    /// `true` keeps the dialogue.
    pub fn keep(&self, dialogue: &Dialogue) -> bool {
        !dialogue.utterances.iter().any(|u| {
            let text = normalise(&u.tokens.join(" "));
            self.needles.iter().any(|n| text.contains(n.as_str()))
        })
    }
}

fn normalise(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// [`PrivacyFilter::keep`] with the default placeholders.
pub fn filter_privacy(dialogue: &Dialogue) -> bool {
    PrivacyFilter::default().keep(dialogue)
}
