//! Lexicon and context-rule part-of-speech tagger for household
//! instructions. Deliberately small: it only has to tell apart the classes
//! the chunk grammar looks at.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Det,
    Poss,
    Pron,
    Prep,
    To,
    Conj,
    Wh,
    Verb,
    Particle,
    Adv,
    Adj,
    Num,
    Noun,
    Punct,
}

/// A word or punctuation token with its byte range in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Token {
    fn is_word(&self) -> bool {
        self.text.chars().next().is_some_and(char::is_alphanumeric)
    }
}

/// Splits into words (alphanumerics with inner apostrophes or hyphens)
/// and single-character punctuation tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_alphanumeric() {
            let mut j = i + 1;
            while j < chars.len() {
                let cj = chars[j].1;
                let joiner = (cj == '\'' || cj == '-' || cj == '’')
                    && chars.get(j + 1).is_some_and(|n| n.1.is_alphanumeric());
                if cj.is_alphanumeric() || joiner {
                    j += 1;
                } else {
                    break;
                }
            }
            let end = chars.get(j).map_or(text.len(), |n| n.0);
            out.push(Token {
                text: text[start..end].to_string(),
                start,
                end,
            });
            i = j;
        } else {
            let end = chars.get(i + 1).map_or(text.len(), |n| n.0);
            out.push(Token {
                text: text[start..end].to_string(),
                start,
                end,
            });
            i += 1;
        }
    }
    out
}

const DET: &[&str] = &[
    "the", "a", "an", "this", "these", "those", "each", "every", "some", "any", "another", "all",
    "both", "no", "either", "neither",
];
const POSS: &[&str] = &["my", "your", "his", "its", "our", "their"];
const PRON: &[&str] = &[
    "it", "them", "me", "you", "him", "us", "i", "we", "they", "she", "he", "something",
    "anything", "everything", "itself", "yourself",
];
const PREP: &[&str] = &[
    "on", "in", "at", "by", "near", "beside", "behind", "under", "underneath", "beneath", "above",
    "below", "over", "between", "among", "from", "with", "without", "of", "into", "onto", "inside",
    "outside", "across", "against", "along", "around", "through", "toward", "towards", "past",
    "beyond", "within", "upon", "off", "up", "down", "out", "like", "for", "about", "after",
    "before", "opposite", "via",
];
const PARTICLES: &[&str] = &["up", "down", "out", "off", "away", "back"];
const CONJ: &[&str] = &["and", "or", "but", "nor"];
const WH: &[&str] = &["which", "who", "whom", "whose", "where", "what", "when", "how", "why"];
const ADV: &[&str] = &[
    "please", "kindly", "then", "there", "here", "also", "just", "only", "very", "really", "too",
    "now", "again", "carefully", "directly", "immediately", "quickly", "not", "straight",
    "together", "upstairs", "downstairs", "nearby", "away", "back", "so",
];
const VERB: &[&str] = &[
    "go", "come", "walk", "head", "proceed", "move", "enter", "exit", "leave", "bring", "take",
    "fetch", "grab", "pick", "get", "give", "hand", "carry", "deliver", "put", "place", "find",
    "locate", "look", "search", "retrieve", "return", "push", "pull", "turn", "switch", "wipe",
    "wash", "remove", "throw", "hang", "fold", "fill", "check", "see", "stand", "sit", "climb",
    "need", "want", "make", "use", "tidy", "organize", "straighten", "adjust", "lift", "touch",
    "sweep", "mop", "vacuum", "replace", "collect", "gather", "is", "are", "was", "were", "be",
    "been", "has", "have", "had", "does", "do", "did", "can", "could", "will", "would", "should",
    "may", "might", "must", "shall", "goes", "contains", "sits", "hangs", "leads", "says",
    "lined", "located", "placed", "hanging", "sitting", "standing", "lying", "leaning", "facing",
];
/// Words that are imperative verbs at clause start and nominal elsewhere.
const CLAUSE_VERB: &[&str] = &["clean", "open", "close", "empty", "water", "dust", "set", "light"];
const ADJ: &[&str] = &[
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black", "brown", "gray",
    "grey", "pink", "silver", "gold", "golden", "beige", "big", "small", "large", "little", "tiny",
    "huge", "tall", "short", "long", "wide", "narrow", "round", "square", "rectangular", "wooden",
    "metal", "metallic", "glass", "plastic", "ceramic", "leather", "soft", "full", "dirty",
    "high", "low", "left", "right", "middle", "top", "bottom", "upper", "lower", "front",
    "nearest", "closest", "farthest", "furthest", "close", "open", "empty", "clean", "first",
    "second", "third", "fourth", "fifth", "last", "next", "other", "same", "main", "dark", "light",
    "bright", "old", "new", "double", "single", "striped", "framed",
];
const NUM: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve",
];

fn lexical(w: &str) -> Option<Tag> {
    let has = |list: &[&str]| list.contains(&w);
    if has(DET) {
        Some(Tag::Det)
    } else if has(POSS) {
        Some(Tag::Poss)
    } else if has(PRON) {
        Some(Tag::Pron)
    } else if has(CONJ) {
        Some(Tag::Conj)
    } else if has(WH) {
        Some(Tag::Wh)
    } else if has(VERB) {
        Some(Tag::Verb)
    } else if has(PREP) {
        Some(Tag::Prep)
    } else if has(ADV) {
        Some(Tag::Adv)
    } else if has(NUM) || w.chars().all(|c| c.is_ascii_digit()) {
        Some(Tag::Num)
    } else if has(ADJ) {
        Some(Tag::Adj)
    } else {
        None
    }
}

fn is_clause_start(prev: Option<Tag>, prev_word: Option<&str>) -> bool {
    match prev {
        None | Some(Tag::Punct) | Some(Tag::Conj) | Some(Tag::To) => true,
        Some(Tag::Adv) => prev_word == Some("please") || prev_word == Some("then"),
        _ => false,
    }
}

pub fn tag(tokens: &[Token]) -> Vec<Tag> {
    let words: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
    let mut tags: Vec<Tag> = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        if !tok.is_word() {
            tags.push(Tag::Punct);
            continue;
        }
        let w = words[i].as_str();
        let next = words.get(i + 1).map(String::as_str);
        let prev = tags.last().copied();
        let prev_word = i.checked_sub(1).map(|p| words[p].as_str());
        let t = if w == "to" {
            match next.and_then(lexical) {
                Some(Tag::Verb) => Tag::To,
                _ if next.is_some_and(|n| CLAUSE_VERB.contains(&n)) => Tag::To,
                _ => Tag::Prep,
            }
        } else if w == "next" && next == Some("to") {
            Tag::Prep
        } else if PARTICLES.contains(&w) && prev == Some(Tag::Verb) {
            Tag::Particle
        } else if w == "that" {
            match prev {
                Some(Tag::Noun) | Some(Tag::Pron) => Tag::Wh,
                _ => match next.and_then(lexical) {
                    Some(Tag::Adj) | None => Tag::Det,
                    _ => Tag::Pron,
                },
            }
        } else if w == "her" {
            match next.and_then(lexical) {
                Some(Tag::Adj) | None => Tag::Poss,
                _ => Tag::Pron,
            }
        } else if CLAUSE_VERB.contains(&w) && is_clause_start(prev, prev_word) {
            Tag::Verb
        } else if CLAUSE_VERB.contains(&w) {
            let noun_follows = next.is_some_and(|n| lexical(n).is_none());
            match prev {
                Some(Tag::Det | Tag::Poss | Tag::Adj | Tag::Num) if noun_follows => Tag::Adj,
                Some(Tag::Verb | Tag::Adv) => Tag::Adj,
                _ => Tag::Noun,
            }
        } else if let Some(t) = lexical(w) {
            let nominal_follows = next.is_some_and(|n| {
                matches!(lexical(n), None | Some(Tag::Adj | Tag::Num)) || CLAUSE_VERB.contains(&n)
            });
            let slot = matches!(prev, Some(Tag::Det | Tag::Poss | Tag::Adj | Tag::Num | Tag::Prep));
            if t == Tag::Adj && slot && !nominal_follows {
                Tag::Noun
            } else {
                t
            }
        } else {
            unknown(w, prev, next)
        };
        tags.push(t);
    }
    tags
}

fn unknown(w: &str, prev: Option<Tag>, next: Option<&str>) -> Tag {
    let modifier_slot = matches!(prev, Some(Tag::Det | Tag::Poss | Tag::Adj | Tag::Num));
    let noun_follows = next.is_some_and(|n| matches!(lexical(n), None | Some(Tag::Adj)));
    if w.len() > 4 && w.ends_with("ly") {
        Tag::Adv
    } else if w.len() > 4 && (w.ends_with("ing") || w.ends_with("ed")) {
        if modifier_slot && noun_follows {
            Tag::Adj
        } else if modifier_slot {
            Tag::Noun
        } else {
            Tag::Verb
        }
    } else {
        Tag::Noun
    }
}
