//! Nudge content: genre-tagged fact sentences and segmented audio stories.
//!
//! The bundled fixture corpus (`data/corpus.json`, `data/stories.json`) is
//! illustrative, not the sentences or recordings used on the original device.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FIXTURE_CORPUS: &str = include_str!("../data/corpus.json");
pub const FIXTURE_STORIES: &str = include_str!("../data/stories.json");

/// Closed genre set for fact sentences (stand-in list for the fixture).
pub const FACT_GENRES: [&str; 8] = [
    "Adventure",
    "Animation",
    "Comedy",
    "Crime",
    "Drama",
    "Horror",
    "Romance",
    "Science Fiction",
];

#[derive(Debug, Error)]
pub enum ContentError {
    #[error("no eligible content left")]
    NoContent,
    #[error("story `{story}` has no segment {cursor} ({len} segments)")]
    StoryExhausted {
        story: String,
        cursor: usize,
        len: usize,
    },
    #[error("unknown genre `{0}`")]
    UnknownGenre(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("unknown story `{0}`")]
    UnknownStory(String),
    #[error("story `{story}` must continue at segment {expected}, not {requested}")]
    OutOfOrderSegment {
        story: String,
        expected: usize,
        requested: usize,
    },
    #[error("invalid corpus: {0}")]
    Invalid(String),
    #[error("corpus json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FactType {
    Popularity,
    Example,
    #[serde(rename = "Actor/Actress")]
    ActorActress,
    #[serde(rename = "Fun fact")]
    FunFact,
    Platform,
    Theme,
}

impl FactType {
    pub const ALL: [FactType; 6] = [
        FactType::Popularity,
        FactType::Example,
        FactType::ActorActress,
        FactType::FunFact,
        FactType::Platform,
        FactType::Theme,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NudgeItem {
    pub id: String,
    pub genre: String,
    #[serde(rename = "type")]
    pub kind: FactType,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Story {
    pub id: String,
    pub genre: String,
    pub plot: String,
    pub segments: Vec<String>,
}

/// What the device plays (or renders as text) for one nudge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NudgeRef {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl From<&NudgeItem> for NudgeRef {
    fn from(item: &NudgeItem) -> Self {
        Self {
            item_id: item.id.clone(),
            audio_ref: item.audio_ref.clone(),
            text: Some(item.text.clone()),
        }
    }
}

impl fmt::Display for NudgeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.item_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub items: usize,
    pub genres: usize,
    pub types: usize,
    pub per_genre: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    items: Vec<NudgeItem>,
}

impl Corpus {
    pub fn new(items: Vec<NudgeItem>) -> Result<Self, ContentError> {
        let mut ids = HashSet::new();
        let mut keys = HashSet::new();
        for item in &items {
            if item.id.is_empty() || item.text.trim().is_empty() {
                return Err(ContentError::Invalid(format!(
                    "item `{}` has an empty id or text",
                    item.id
                )));
            }
            if !FACT_GENRES.contains(&item.genre.as_str()) {
                return Err(ContentError::Invalid(format!(
                    "item `{}` has genre `{}` outside the closed genre set",
                    item.id, item.genre
                )));
            }
            if !ids.insert(item.id.as_str()) {
                return Err(ContentError::Invalid(format!("duplicate id `{}`", item.id)));
            }
            if !keys.insert((item.genre.as_str(), item.kind, item.text.as_str())) {
                return Err(ContentError::Invalid(format!(
                    "item `{}` duplicates another (genre, type, text)",
                    item.id
                )));
            }
        }
        Ok(Self { items })
    }

    pub fn from_json(text: &str) -> Result<Self, ContentError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ContentError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn fixture() -> Self {
        Self::from_json(FIXTURE_CORPUS).expect("bundled corpus is valid")
    }

    pub fn items(&self) -> &[NudgeItem] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&NudgeItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn genres(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.genre.as_str()).collect()
    }

    pub fn summary(&self) -> CorpusSummary {
        let mut per_genre = BTreeMap::new();
        for item in &self.items {
            *per_genre.entry(item.genre.clone()).or_insert(0) += 1;
        }
        let types: BTreeSet<_> = self.items.iter().map(|i| i.kind).collect();
        CorpusSummary {
            items: self.items.len(),
            genres: per_genre.len(),
            types: types.len(),
            per_genre,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoryLibrary {
    stories: Vec<Story>,
}

impl StoryLibrary {
    pub fn new(stories: Vec<Story>) -> Result<Self, ContentError> {
        let mut ids = HashSet::new();
        for s in &stories {
            if s.segments.is_empty() {
                return Err(ContentError::Invalid(format!("story `{}` has no segments", s.id)));
            }
            if s.genre.trim().is_empty() {
                return Err(ContentError::Invalid(format!("story `{}` has no genre", s.id)));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(ContentError::Invalid(format!("duplicate story id `{}`", s.id)));
            }
        }
        Ok(Self { stories })
    }

    pub fn from_json(text: &str) -> Result<Self, ContentError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ContentError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn fixture() -> Self {
        Self::from_json(FIXTURE_STORIES).expect("bundled stories are valid")
    }

    pub fn stories(&self) -> &[Story] {
        &self.stories
    }

    pub fn get(&self, id: &str) -> Option<&Story> {
        self.stories.iter().find(|s| s.id == id)
    }

    /// Distinct genres in sorted order.
    pub fn genres(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.stories.iter().map(|s| s.genre.as_str()).collect();
        set.into_iter().collect()
    }

    /// First story of the given genre (case-insensitive match).
    pub fn by_genre(&self, genre: &str) -> Option<&Story> {
        self.stories
            .iter()
            .find(|s| s.genre.eq_ignore_ascii_case(genre))
    }
}

/// Genres the participants picked before the session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Preferences {
    genres: BTreeSet<String>,
}

impl Preferences {
    pub fn new<I, S>(genres: I, corpus: &Corpus) -> Result<Self, ContentError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let prefs = Self {
            genres: genres.into_iter().map(Into::into).collect(),
        };
        prefs.validate(corpus)?;
        Ok(prefs)
    }

    /// Every genre present in the corpus.
    pub fn all(corpus: &Corpus) -> Self {
        Self {
            genres: corpus.genres().into_iter().map(String::from).collect(),
        }
    }

    pub fn validate(&self, corpus: &Corpus) -> Result<(), ContentError> {
        if self.genres.is_empty() {
            return Err(ContentError::Invalid("preferences must name at least one genre".into()));
        }
        let available = corpus.genres();
        match self.genres.iter().find(|g| !available.contains(g.as_str())) {
            Some(g) => Err(ContentError::UnknownGenre(g.clone())),
            None => Ok(()),
        }
    }

    pub fn contains(&self, genre: &str) -> bool {
        self.genres.contains(genre)
    }

    pub fn genres(&self) -> impl Iterator<Item = &str> {
        self.genres.iter().map(String::as_str)
    }
}

/// Uniform choice among corpus items in a preferred genre that have not been
/// played yet. Eligible items are taken in corpus order, so a fixed seed
/// gives a fixed choice.
pub fn select_fact<'a, R: Rng + ?Sized>(
    corpus: &'a Corpus,
    prefs: &Preferences,
    history: &HashSet<String>,
    rng: &mut R,
) -> Result<&'a NudgeItem, ContentError> {
    let eligible: Vec<&NudgeItem> = corpus
        .items()
        .iter()
        .filter(|i| prefs.contains(&i.genre) && !history.contains(&i.id))
        .collect();
    if eligible.is_empty() {
        return Err(ContentError::NoContent);
    }
    Ok(eligible[rng.random_range(0..eligible.len())])
}

pub fn next_segment(story: &Story, cursor: usize) -> Result<&str, ContentError> {
    story
        .segments
        .get(cursor)
        .map(String::as_str)
        .ok_or_else(|| ContentError::StoryExhausted {
            story: story.id.clone(),
            cursor,
            len: story.segments.len(),
        })
}

/// Token genre if one is attached, otherwise a uniformly random genre among
/// the stories on hand.
pub fn genre_for_session<R: Rng + ?Sized>(
    library: &StoryLibrary,
    token: Option<&str>,
    rng: &mut R,
) -> Result<String, ContentError> {
    let genres = library.genres();
    match token {
        Some(tok) => genres
            .iter()
            .find(|g| g.eq_ignore_ascii_case(tok))
            .map(|g| g.to_string())
            .ok_or_else(|| ContentError::UnknownGenre(tok.to_string())),
        None if genres.is_empty() => Err(ContentError::NoContent),
        None => Ok(genres[rng.random_range(0..genres.len())].to_string()),
    }
}

/// Anything that can hand the policy its next automatic nudge.
pub trait NudgeSource {
    fn next_nudge(&mut self) -> Result<NudgeRef, ContentError>;
}

/// How automatic nudges are chosen for a session.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AutoContent {
    /// Fact sentences from the preferred genres.
    #[default]
    Facts,
    /// Successive segments of one story, picked by genre token (or at random).
    Story {
        #[serde(default)]
        token: Option<String>,
    },
}


/// Operator request for a specific nudge.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NudgeRequest {
    pub genre: Option<String>,
    pub item_id: Option<String>,
    pub story_id: Option<String>,
    pub segment: Option<usize>,
}

/// Session-scoped content state: corpus, story cursors and play history.
#[derive(Debug, Clone)]
pub struct SessionContent {
    corpus: Arc<Corpus>,
    stories: Arc<StoryLibrary>,
    prefs: Preferences,
    auto: AutoContent,
    auto_story: Option<String>,
    history: HashSet<String>,
    cursors: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl SessionContent {
    pub fn new(
        corpus: Arc<Corpus>,
        stories: Arc<StoryLibrary>,
        prefs: Preferences,
        auto: AutoContent,
        seed: u64,
    ) -> Result<Self, ContentError> {
        prefs.validate(&corpus)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let auto_story = match &auto {
            AutoContent::Facts => None,
            AutoContent::Story { token } => {
                let genre = genre_for_session(&stories, token.as_deref(), &mut rng)?;
                let story = stories
                    .by_genre(&genre)
                    .ok_or_else(|| ContentError::UnknownGenre(genre.clone()))?;
                Some(story.id.clone())
            }
        };
        Ok(Self {
            corpus,
            stories,
            prefs,
            auto,
            auto_story,
            history: HashSet::new(),
            cursors: HashMap::new(),
            rng,
        })
    }

    pub fn history(&self) -> &HashSet<String> {
        &self.history
    }

    pub fn reset_history(&mut self) {
        self.history.clear();
    }

    pub fn auto_story(&self) -> Option<&str> {
        self.auto_story.as_deref()
    }

    pub fn auto_mode(&self) -> &AutoContent {
        &self.auto
    }

    fn play_fact(&mut self, item: &NudgeItem) -> NudgeRef {
        self.history.insert(item.id.clone());
        NudgeRef::from(item)
    }

    fn fact_from(&mut self, prefs: &Preferences) -> Result<NudgeRef, ContentError> {
        let item = select_fact(&self.corpus, prefs, &self.history, &mut self.rng)?.clone();
        Ok(self.play_fact(&item))
    }

    fn story_segment(&mut self, story_id: &str, requested: Option<usize>) -> Result<NudgeRef, ContentError> {
        let story = self
            .stories
            .get(story_id)
            .ok_or_else(|| ContentError::UnknownStory(story_id.to_string()))?;
        let cursor = self.cursors.get(story_id).copied().unwrap_or(0);
        if let Some(requested) = requested.filter(|&r| r != cursor) {
            return Err(ContentError::OutOfOrderSegment {
                story: story_id.to_string(),
                expected: cursor,
                requested,
            });
        }
        let audio = next_segment(story, cursor)?.to_string();
        self.cursors.insert(story_id.to_string(), cursor + 1);
        Ok(NudgeRef {
            item_id: format!("{story_id}#{cursor}"),
            audio_ref: Some(audio),
            text: None,
        })
    }

    /// Resolves an operator request. An empty request behaves like an
    /// automatic nudge.
    pub fn resolve(&mut self, req: &NudgeRequest) -> Result<NudgeRef, ContentError> {
        if let Some(id) = &req.item_id {
            let item = self
                .corpus
                .get(id)
                .ok_or_else(|| ContentError::UnknownItem(id.clone()))?
                .clone();
            return Ok(self.play_fact(&item));
        }
        if let Some(story_id) = &req.story_id {
            return self.story_segment(story_id, req.segment);
        }
        if let Some(genre) = &req.genre {
            if FACT_GENRES.contains(&genre.as_str()) {
                let prefs = Preferences::new([genre.clone()], &self.corpus)?;
                return self.fact_from(&prefs);
            }
            let story = self
                .stories
                .by_genre(genre)
                .ok_or_else(|| ContentError::UnknownGenre(genre.clone()))?
                .id
                .clone();
            return self.story_segment(&story, None);
        }
        self.next_nudge()
    }
}

impl NudgeSource for SessionContent {
    fn next_nudge(&mut self) -> Result<NudgeRef, ContentError> {
        match self.auto_story.clone() {
            Some(story) => self.story_segment(&story, None).map_err(|e| match e {
                ContentError::StoryExhausted { .. } => ContentError::NoContent,
                other => other,
            }),
            None => {
                let prefs = self.prefs.clone();
                self.fact_from(&prefs)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn item(id: &str, genre: &str, kind: FactType) -> NudgeItem {
        NudgeItem {
            id: id.into(),
            genre: genre.into(),
            kind,
            text: format!("text for {id}"),
            audio_ref: None,
            voice: None,
        }
    }

    #[test]
    fn fixture_counts() {
        let s = Corpus::fixture().summary();
        assert_eq!((s.items, s.genres, s.types), (90, 8, 6));
        let stories = StoryLibrary::fixture();
        assert_eq!(stories.stories().len(), 6);
        assert_eq!(
            stories.genres(),
            vec!["Comedy", "Crime", "Fantasy", "Romance", "Sci-fi", "Tragedy"]
        );
    }

    #[test]
    fn forced_choice() {
        let corpus = Corpus::new(vec![item("a", "Adventure", FactType::Theme)]).unwrap();
        let prefs = Preferences::new(["Adventure"], &corpus).unwrap();
        let got = select_fact(&corpus, &prefs, &HashSet::new(), &mut rng(1)).unwrap();
        assert_eq!(got.id, "a");
    }

    #[test]
    fn selection_respects_preferences() {
        let corpus = Corpus::fixture();
        let prefs = Preferences::new(["Adventure"], &corpus).unwrap();
        for seed in 0..50 {
            let got = select_fact(&corpus, &prefs, &HashSet::new(), &mut rng(seed)).unwrap();
            assert_eq!(got.genre, "Adventure");
        }
    }

    #[test]
    fn full_history_means_no_content() {
        let corpus = Corpus::fixture();
        let prefs = Preferences::new(["Adventure"], &corpus).unwrap();
        let history: HashSet<String> = corpus.items().iter().map(|i| i.id.clone()).collect();
        assert!(matches!(
            select_fact(&corpus, &prefs, &history, &mut rng(3)),
            Err(ContentError::NoContent)
        ));
    }

    #[test]
    fn segments_in_order_then_exhausted() {
        let story = Story {
            id: "s".into(),
            genre: "Crime".into(),
            plot: "p".into(),
            segments: vec!["0".into(), "1".into(), "2".into()],
        };
        let got: Vec<&str> = (0..3).map(|c| next_segment(&story, c).unwrap()).collect();
        assert_eq!(got, ["0", "1", "2"]);
        assert!(matches!(
            next_segment(&story, 3),
            Err(ContentError::StoryExhausted { cursor: 3, len: 3, .. })
        ));
    }

    #[test]
    fn genre_token_and_random_genre() {
        let lib = StoryLibrary::fixture();
        assert_eq!(genre_for_session(&lib, Some("Crime"), &mut rng(0)).unwrap(), "Crime");
        assert_eq!(genre_for_session(&lib, Some("crime"), &mut rng(9)).unwrap(), "Crime");
        assert!(matches!(
            genre_for_session(&lib, Some("Western"), &mut rng(0)),
            Err(ContentError::UnknownGenre(_))
        ));

        let single = StoryLibrary::new(vec![lib.stories()[0].clone()]).unwrap();
        assert_eq!(
            genre_for_session(&single, None, &mut rng(5)).unwrap(),
            lib.stories()[0].genre
        );
        let a = genre_for_session(&lib, None, &mut rng(42)).unwrap();
        let b = genre_for_session(&lib, None, &mut rng(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loader_rejects_bad_corpora() {
        let dup = vec![item("a", "Drama", FactType::Theme), item("a", "Drama", FactType::Example)];
        assert!(Corpus::new(dup).is_err());
        let bad_genre = vec![item("a", "Western", FactType::Theme)];
        assert!(Corpus::new(bad_genre).is_err());
        let bad_type = r#"[{"id":"x","genre":"Drama","type":"Trivia","text":"t"}]"#;
        assert!(Corpus::from_json(bad_type).is_err());
        let empty_story = r#"[{"id":"x","genre":"Crime","plot":"p","segments":[]}]"#;
        assert!(StoryLibrary::from_json(empty_story).is_err());
        assert!(Preferences::new(Vec::<String>::new(), &Corpus::fixture()).is_err());
        assert!(matches!(
            Preferences::new(["Western"], &Corpus::fixture()),
            Err(ContentError::UnknownGenre(_))
        ));
    }

    #[test]
    fn session_content_story_mode_walks_segments() {
        let corpus = Arc::new(Corpus::fixture());
        let stories = Arc::new(StoryLibrary::fixture());
        let prefs = Preferences::all(&corpus);
        let mut c = SessionContent::new(
            corpus,
            stories.clone(),
            prefs,
            AutoContent::Story {
                token: Some("Crime".into()),
            },
            7,
        )
        .unwrap();
        let crime = stories.by_genre("Crime").unwrap();
        for (i, seg) in crime.segments.iter().enumerate() {
            let n = c.next_nudge().unwrap();
            assert_eq!(n.item_id, format!("{}#{i}", crime.id));
            assert_eq!(n.audio_ref.as_deref(), Some(seg.as_str()));
        }
        assert!(matches!(c.next_nudge(), Err(ContentError::NoContent)));
    }

    #[test]
    fn operator_requests() {
        let corpus = Arc::new(Corpus::fixture());
        let stories = Arc::new(StoryLibrary::fixture());
        let prefs = Preferences::new(["Drama"], &corpus).unwrap();
        let mut c =
            SessionContent::new(corpus.clone(), stories, prefs, AutoContent::Facts, 1).unwrap();

        let by_id = c
            .resolve(&NudgeRequest {
                item_id: Some("hor-03".into()),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(by_id.item_id, "hor-03");
        assert!(c.history().contains("hor-03"));

        let by_genre = c
            .resolve(&NudgeRequest {
                genre: Some("Comedy".into()),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(corpus.get(&by_genre.item_id).unwrap().genre, "Comedy");

        let seg0 = c
            .resolve(&NudgeRequest {
                story_id: Some("crime".into()),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(seg0.item_id, "crime#0");
        let skip = c.resolve(&NudgeRequest {
            story_id: Some("crime".into()),
            segment: Some(3),
            ..Default::default()
        });
        assert!(matches!(skip, Err(ContentError::OutOfOrderSegment { expected: 1, .. })));
        let story_by_genre = c
            .resolve(&NudgeRequest {
                genre: Some("Crime".into()),
                ..Default::default()
            })
            .unwrap();
        // "Crime" is also a fact genre, so it resolves to a sentence.
        assert!(corpus.get(&story_by_genre.item_id).is_some());
        let fantasy = c
            .resolve(&NudgeRequest {
                genre: Some("Fantasy".into()),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(fantasy.item_id, "fantasy#0");

        let auto = c.resolve(&NudgeRequest::default()).unwrap();
        assert_eq!(corpus.get(&auto.item_id).unwrap().genre, "Drama");
    }
}
