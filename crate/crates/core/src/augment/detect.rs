//! Language identification for extracted descriptions.

/// Decides whether a description is written in English.
pub trait LanguageDetector: Send + Sync {
    fn is_english(&self, text: &str) -> bool;
}

/// Accepts everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAll;

impl LanguageDetector for AcceptAll {
    fn is_english(&self, _: &str) -> bool {
        true
    }
}

const ENGLISH: &[&str] = &[
    "a", "about", "after", "all", "an", "and", "any", "are", "as", "at", "be", "been", "before", "both", "but", "by",
    "can", "could", "do", "does", "each", "either", "for", "from", "given", "has", "have", "how", "if", "in", "into",
    "is", "it", "its", "may", "more", "must", "no", "not", "of", "on", "one", "only", "or", "other", "otherwise",
    "over", "same", "should", "so", "some", "than", "that", "the", "their", "then", "there", "these", "this", "those",
    "to", "two", "under", "until", "up", "used", "using", "was", "we", "were", "what", "when", "where", "whether",
    "which", "while", "who", "will", "with", "would", "you", "your",
];

/// Frequent function words of the languages most often met in source
/// comments besides English.
const FOREIGN: &[&str] = &[
    "aus", "auf", "bei", "das", "dem", "den", "der", "des", "die", "ein", "eine", "einen", "es", "est", "et", "für",
    "gibt", "ist", "le", "la", "les", "los", "las", "mit", "nicht", "oder", "para", "pour", "que", "sich", "sind",
    "une", "und", "von", "wird", "zu", "zum", "zur", "el", "del", "una", "por", "con", "dans", "sur", "ou", "não",
    "uma", "dos", "ja", "ei", "og", "het", "een", "niet", "van", "voor",
];

/// Stop-word heuristic: enough English function words, and more of them
/// than function words of other languages.
#[derive(Debug, Clone, Copy)]
pub struct StopWordDetector {
    /// Minimum share of English stop words among all words.
    pub min_ratio: f64,
}

impl Default for StopWordDetector {
    fn default() -> Self {
        StopWordDetector { min_ratio: 0.1 }
    }
}

impl LanguageDetector for StopWordDetector {
    fn is_english(&self, text: &str) -> bool {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphabetic())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return false;
        }
        let english = words.iter().filter(|w| ENGLISH.contains(&w.as_str())).count();
        let foreign = words.iter().filter(|w| FOREIGN.contains(&w.as_str())).count();
        english > foreign && english as f64 / words.len() as f64 >= self.min_ratio
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdicts() {
        let d = StopWordDetector::default();
        assert!(d.is_english("Returns the max of a and b. Do not step into this function."));
        assert!(d.is_english(
            "A method that return Yes only if both monkeys are smiling or not smiling @param aSmile"
        ));
        assert!(!d.is_english("Gibt das Maximum von a und b zurück, ohne den Überlauf zu prüfen."));
        assert!(!d.is_english("Renvoie le maximum de a et b pour les entiers positifs."));
        assert!(!d.is_english("计算两个整数的最大值"));
        assert!(!d.is_english(""));
    }
}
