//! Test doubles shared by unit tests, integration tests and the fixture
//! generator: scripted transports, a one-shot HTTP server, and the scripted
//! model behind the shipped Pontiac Rageous case-study fixtures.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use crate::gateway::{ChatRequest, Role, Transport, TransportError};

/// Transport backed by a closure, counting every send.
pub struct FnTransport<F> {
    respond: F,
    calls: AtomicUsize,
}

impl<F> FnTransport<F>
where
    F: Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync,
{
    pub fn new(respond: F) -> Self {
        Self { respond, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F> Transport for FnTransport<F>
where
    F: Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync,
{
    fn backend_id(&self) -> &str {
        "scripted"
    }

    fn send(&self, req: &ChatRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.respond)(req)
    }
}

/// Fails the test if anything tries to reach a live backend.
pub struct PanicTransport;

impl Transport for PanicTransport {
    fn backend_id(&self) -> &str {
        "panic"
    }

    fn send(&self, req: &ChatRequest) -> Result<String, TransportError> {
        panic!("unexpected live {} call", req.role)
    }
}

#[derive(Debug, Clone)]
pub struct CannedHttp {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

impl CannedHttp {
    pub fn json(status: u16, body: &str) -> Self {
        Self { status, content_type: "application/json", body: body.to_owned() }
    }

    pub fn status(status: u16, body: &str) -> Self {
        Self { status, content_type: "text/plain", body: body.to_owned() }
    }
}

#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

pub struct MockServer {
    addr: String,
    seen: Arc<Mutex<Vec<SeenRequest>>>,
}

impl MockServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}

fn read_request(stream: &mut TcpStream) -> Option<SeenRequest> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_owned();
    let path = parts.next()?.to_owned();
    let mut headers = Vec::new();
    let mut content_length = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_owned(), v.trim().to_owned());
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body).ok()?;
    Some(SeenRequest { method, path, headers, body: String::from_utf8_lossy(&body).into_owned() })
}

/// Serves `responses` in order, one per connection, then stops accepting.
pub fn serve_http(responses: Vec<CannedHttp>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
    let addr = listener.local_addr().unwrap().to_string();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = seen.clone();
    thread::spawn(move || {
        for canned in responses {
            let Ok((mut stream, _)) = listener.accept() else { return };
            if let Some(req) = read_request(&mut stream) {
                sink.lock().unwrap().push(req);
            }
            let reply = format!(
                "HTTP/1.1 {} X\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                canned.status,
                canned.content_type,
                canned.body.len(),
                canned.body
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    MockServer { addr, seen }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    Some(rest[..rest.find(end).unwrap_or(rest.len())].trim())
}

fn restored_triplet(user: &str) -> (String, String, String) {
    let inner = between(user, "Triplet: (", ")\n").expect("restore request carries a triplet");
    let parts: Vec<&str> = inner.split(", ").collect();
    (parts[0].to_owned(), parts[1].to_owned(), parts[2..].join(", "))
}

/// A deterministic stand-in model for arbitrary synthetic sentences.
///
/// Sentences of the form `"<subject> <relation> <object>."` extract to one
/// triplet; restorations and NLI verdicts follow mechanically, every
/// gradient is a short fixed text and each update appends a revision line.
pub fn synthetic_llm(req: &ChatRequest) -> Result<String, TransportError> {
    let user = req.user_text.as_str();
    Ok(match req.role {
        Role::Extract => {
            let words: Vec<&str> = user.trim().trim_end_matches('.').split_whitespace().collect();
            if words.len() < 3 {
                "I could not find any triplets.".to_owned()
            } else {
                format!("[{}, {}, {}]", words[0], words[1], words[2..].join(" "))
            }
        }
        Role::Restore => {
            let (s, r, o) = restored_triplet(user);
            format!("{s} {r} {o}.")
        }
        Role::Nli => {
            let premise = between(user, "Premise: ", "\nHypothesis:").unwrap_or_default().to_lowercase();
            let hypothesis = between(user, "Hypothesis: ", "\n").unwrap_or_default().to_lowercase();
            let label = if hypothesis.trim_end_matches('.').split_whitespace().all(|w| premise.contains(w)) {
                "entailment"
            } else {
                "neutral"
            };
            format!("{{\"label\": \"{label}\", \"confidence\": 0.9, \"reasoning\": \"synthetic\"}}")
        }
        Role::Grad1 => "Correctness: keep relations faithful to the text.".to_owned(),
        Role::Grad2 => "Clarify Relationship Extraction: prefer explicit relations.".to_owned(),
        Role::Update => {
            let prompt = between(user, "<VARIABLE>", "</VARIABLE>").unwrap_or_default();
            format!("<VARIABLE>\n{prompt}\n- Prefer explicit relations.\n</VARIABLE>")
        }
        Role::RcDecide => {
            let query = between(user, "The relation \"", "\"").unwrap_or_default().to_owned();
            let choices = between(user, "Choices:\n", "\nAnswer").unwrap_or_default();
            if choices.lines().any(|l| {
                l.split(" \u{2014} ").next().and_then(|c| c.split_once(". ")).map(|(_, n)| n) == Some(query.as_str())
            }) {
                query
            } else {
                "None of the above".to_owned()
            }
        }
    })
}

/// Content of the Pontiac Rageous case study used by the golden fixtures.
pub mod case_study {
    use super::*;

    pub const SENTENCE_ID: &str = "webnlg-pontiac-rageous";
    pub const SENTENCE: &str = "In the city of Detroit in the state of Michigan, the first Pontiac Rageous was produced on the assembly line in 1997.";

    pub const INITIAL_EXTRACTION: &str =
        "[Pontiac Rageous, assembly, Detroit]\n[Pontiac Rageous, buildDate, 1997]\n[Pontiac Rageous, state, Michigan]";

    pub const OPTIMIZED_EXTRACTION: &str = "[Detroit, state, Michigan]\n[Pontiac Rageous, productionYear, 1997]\n[Pontiac Rageous, productionLocation, Detroit]\n[Pontiac Rageous, productionLocation, Michigan]";

    pub const OPTIMIZED_PROMPT: &str = "Your task is to transform the given text into a semantic graph represented as a list of relational triplets.\n- Extract all explicitly stated, text-supported relationships between entities, without omitting any valid relations mentioned in the input.\n- Ensure that each extracted triplet captures a single, atomic, and contextually accurate relation, using concise and unambiguous relationship phrases faithful to the semantics expressed in the text.\n- Avoid inferred, explanatory, or implicit relations that are not explicitly stated.\n- Present the triplets in the format [Entity1, Relationship (clear term), Entity2].\nIn your answer, output only the list of triplets and do not include any additional text.";

    pub const FEEDBACK: &str = "Correctness:\nEnsure that all elements of the triplet are accurately derived from the source text. In this case, verify if the relationship 'state' truly describes the connection between 'Pontiac Rageous' and 'Michigan.' If the extracted term is not reflective of the actual relation depicted in the source, it may require re-evaluation. Consider revising the relation to something more precise if applicable.\nCompleteness:\nEnsure that all relevant context is captured within the triplet. If 'Detroit, Michigan' is the specific location mentioned, it might be beneficial to capture the city for more precision.\nClarity:\nClearly define the nature of the relation so that it is unambiguous. If 'state' lacks clarity, replace it with a more explicit term that reflects the nature of the relationship.\nEnsure that end-users understand what the relationship describes. If the triplet is part of a larger dataset, maintain consistent terminology across entries.\nRe-evaluation of the Context:\nReview the source context to verify that the extracted triplet holds true under likely interpretations. If the premise doesn't support the hypothesis concretely, consider rephrasing the triplet to match the available evidence in the text.";

    pub const GUIDANCE: &str = "To enhance the system prompt for Relational Triplet Extraction, several targeted modifications are necessary:\nClarify Relationship Extraction: Encourage accuracy by specifying that the relationship term must directly reflect the semantic link in the context. Update the prompt to include examples of explicit relationships to guide the model toward correct interpretations, especially when multiple relationships might be inferred.\nExample: 'Transform the given text into a semantic graph of triplets, with relationships reflecting direct context links'\nEmphasize Completeness: Instruct the model to prioritize capturing all contextually relevant details, ensuring precise location-based relationships are extracted. Add guidelines for interpreting nested or compound locations like 'city, state' instead of only considering individual elements.\nExample: 'Ensure completeness by evaluating compound locations and specific contexts thoroughly, e.g., 'Detroit, Michigan'.\nEnhance Clarity: Define the expected structure and context of the triplets more clearly. Suggest using clear and standardized relationship terminology within the dataset's context, ensuring reliable consistency.\nExample: 'Maintain clarity and consistency in relationships, preferring standard terms within the dataset's context.'\nRe-evaluate Contextually: Encourage a thorough re-evaluation of the text to confirm that extracted relationships are contextually supported, preventing assumptions not rooted in the provided information.";

    /// (subject, relation, object, restored sentence)
    pub const RESTORATIONS: &[(&str, &str, &str, &str)] = &[
        ("Pontiac Rageous", "assembly", "Detroit", "The Pontiac Rageous was assembled in Detroit."),
        ("Pontiac Rageous", "buildDate", "1997", "The Pontiac Rageous was built in 1997."),
        ("Pontiac Rageous", "state", "Michigan", "The Pontiac Rageous is associated with the state of Michigan."),
        ("Detroit", "state", "Michigan", "Detroit is located in the state of Michigan."),
        ("Pontiac Rageous", "productionYear", "1997", "The Pontiac Rageous was produced in 1997."),
        ("Pontiac Rageous", "productionLocation", "Detroit", "The Pontiac Rageous was produced in Detroit."),
        ("Pontiac Rageous", "productionLocation", "Michigan", "The Pontiac Rageous was produced in Michigan."),
    ];

    /// (hypothesis, NLI response)
    pub const JUDGEMENTS: &[(&str, &str)] = &[
        (
            "The Pontiac Rageous was assembled in Detroit.",
            "{\n  \"label\": \"entailment\",\n  \"confidence\": 0.95,\n  \"reasoning\": \"The premise explicitly states that the first Pontiac Rageous was produced on the assembly line in Detroit, thus confirming that the Pontiac Rageous was assembled in Detroit.\"\n}",
        ),
        (
            "The Pontiac Rageous was built in 1997.",
            "{\n  \"label\": \"entailment\",\n  \"confidence\": 0.9,\n  \"reasoning\": \"The premise states that the first Pontiac Rageous was produced on the assembly line in 1997 in Detroit. This supports the hypothesis that the Pontiac Rageous was built in 1997, making the hypothesis logically follow from the premise.\"\n}",
        ),
        (
            "The Pontiac Rageous is associated with the state of Michigan.",
            "{\n  \"label\": \"neutral\",\n  \"confidence\": 0.85,\n  \"reasoning\": \"The premise states that the Pontiac Rageous was produced in Detroit, Michigan, in 1997, but it does not provide information about the current location of the Pontiac Rageous. Hence, the hypothesis that asks if the Pontiac Rageous is currently in Michigan is neither confirmed nor denied by the premise.\"\n}",
        ),
    ];

    /// Seed memory for the case study: one pre-existing canonical relation.
    pub const SEED_RELATIONS: &str = "buildDate\tThe [SUBJECT] was built in [OBJECT].\n";

    pub fn respond(req: &ChatRequest) -> Result<String, TransportError> {
        let user = req.user_text.as_str();
        let missing = || TransportError::Fatal(format!("no scripted {} response for {user:?}", req.role));
        match req.role {
            Role::Extract => {
                let system = req.system_text.as_deref().unwrap_or_default();
                Ok(if system == OPTIMIZED_PROMPT { OPTIMIZED_EXTRACTION } else { INITIAL_EXTRACTION }.to_owned())
            }
            Role::Restore => {
                let (s, r, o) = restored_triplet(user);
                RESTORATIONS
                    .iter()
                    .find(|(ts, tr, to, _)| (*ts, *tr, *to) == (s.as_str(), r.as_str(), o.as_str()))
                    .map(|(.., text)| text.to_string())
                    .ok_or_else(missing)
            }
            Role::Nli => {
                let hypothesis = between(user, "Hypothesis: ", "\n").unwrap_or_default();
                JUDGEMENTS.iter().find(|(h, _)| *h == hypothesis).map(|(_, j)| j.to_string()).ok_or_else(missing)
            }
            Role::Grad1 => Ok(FEEDBACK.to_owned()),
            Role::Grad2 => Ok(GUIDANCE.to_owned()),
            Role::Update => Ok(format!("<VARIABLE>\n{OPTIMIZED_PROMPT}\n</VARIABLE>")),
            Role::RcDecide => {
                let query = between(user, "The relation \"", "\"").unwrap_or_default();
                let choices = between(user, "Choices:\n", "\nAnswer").unwrap_or_default();
                Ok(match query {
                    "productionYear" if choices.contains("buildDate") => "buildDate".to_owned(),
                    "productionLocation" if choices.contains("productionLocation") => "productionLocation".to_owned(),
                    _ => "None of the above".to_owned(),
                })
            }
        }
    }
}
