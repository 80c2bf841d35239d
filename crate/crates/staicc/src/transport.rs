//! JSON-lines transport for the gateway protocol: a server loop usable over
//! stdio or HTTP, a pipelining child-process client, and an HTTP client.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use staicc_core::gateway::{
    Gateway, GatewayError, GatewayRequest, GatewayResponse, WireError, WireRequest,
    WireRequestBody, WireResponse, WireResponseBody, PROTOCOL_VERSION,
};

pub const DEFAULT_WINDOW: usize = 16;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const HTTP_ATTEMPTS: u32 = 3;

fn error_body(e: &GatewayError) -> WireResponseBody {
    WireResponseBody::Error {
        error: WireError::from(e),
    }
}

/// Answers one request line.
pub fn handle_line<G: Gateway + ?Sized>(gw: &mut G, line: &str) -> WireResponse {
    let req: WireRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id")?.as_u64())
                .unwrap_or(0);
            let err = GatewayError::Protocol(format!("malformed request: {e}"));
            return WireResponse::new(id, error_body(&err));
        }
    };
    if req.version != PROTOCOL_VERSION {
        let err = GatewayError::Protocol(format!(
            "unsupported version {:?}, expected {PROTOCOL_VERSION:?}",
            req.version
        ));
        return WireResponse::new(req.id, error_body(&err));
    }
    let body = match req.body {
        WireRequestBody::Embed { embed } => match gw.embed(&embed) {
            Ok(embedding) => WireResponseBody::Embedding { embedding },
            Err(e) => error_body(&e),
        },
        WireRequestBody::Verbalizers { check_verbalizers } => {
            match gw.check_verbalizers(&check_verbalizers) {
                Ok(()) => WireResponseBody::Ok { ok: true },
                Err(e) => error_body(&e),
            }
        }
        WireRequestBody::Predict(p) => match p.validate().and_then(|()| gw.predict(&p)) {
            Ok(resp) => WireResponseBody::Predict(resp),
            Err(e) => error_body(&e),
        },
    };
    WireResponse::new(req.id, body)
}

pub fn encode<T: serde::Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("wire message serializes")
}

/// Serves requests line by line until EOF. Blank lines are ignored.
pub fn serve<G: Gateway + ?Sized, R: BufRead, W: Write>(
    gw: &mut G,
    input: R,
    mut output: W,
) -> std::io::Result<usize> {
    let mut served = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", encode(&handle_line(gw, &line)))?;
        output.flush()?;
        served += 1;
    }
    Ok(served)
}

/// Serves HTTP POSTs whose bodies hold one or more request lines; the reply
/// holds the matching response lines. Stops after `limit` requests if set.
pub fn serve_http<G: Gateway + ?Sized>(
    gw: &mut G,
    server: &tiny_http::Server,
    limit: Option<usize>,
) -> std::io::Result<()> {
    for (handled, mut request) in server.incoming_requests().enumerate() {
        let mut body = String::new();
        request.as_reader().read_to_string(&mut body)?;
        let mut out = String::new();
        for line in body.lines().filter(|l| !l.trim().is_empty()) {
            out.push_str(&encode(&handle_line(gw, line)));
            out.push('\n');
        }
        let header = tiny_http::Header::from_bytes("Content-Type", "application/x-ndjson")
            .expect("static header");
        request.respond(tiny_http::Response::from_string(out).with_header(header))?;
        if limit.is_some_and(|l| handled + 1 >= l) {
            break;
        }
    }
    Ok(())
}

fn decode_predict(
    body: Result<WireResponseBody, GatewayError>,
) -> Result<GatewayResponse, GatewayError> {
    match body? {
        WireResponseBody::Predict(r) if !r.is_empty() => Ok(r),
        WireResponseBody::Error { error } => Err(error.into()),
        other => Err(GatewayError::Protocol(format!(
            "unexpected response {}",
            encode(&other)
        ))),
    }
}

fn decode_embed(body: Result<WireResponseBody, GatewayError>) -> Result<Vec<f64>, GatewayError> {
    match body? {
        WireResponseBody::Embedding { embedding } => Ok(embedding),
        WireResponseBody::Error { error } => Err(error.into()),
        other => Err(GatewayError::Protocol(format!(
            "unexpected response {}",
            encode(&other)
        ))),
    }
}

fn decode_ok(body: Result<WireResponseBody, GatewayError>) -> Result<(), GatewayError> {
    match body? {
        WireResponseBody::Ok { ok: true } => Ok(()),
        WireResponseBody::Error { error } => Err(error.into()),
        other => Err(GatewayError::Protocol(format!(
            "unexpected response {}",
            encode(&other)
        ))),
    }
}

/// Request/response exchange shared by both clients.
trait Exchange {
    fn exchange(
        &mut self,
        bodies: Vec<WireRequestBody>,
    ) -> Vec<Result<WireResponseBody, GatewayError>>;
    fn fingerprint(&self) -> String;
}

/// Every [`Exchange`] is a [`Gateway`].
pub struct WireGateway<E>(E);

impl<E: Exchange> Gateway for WireGateway<E> {
    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    fn predict(&mut self, req: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        self.predict_batch(std::slice::from_ref(req)).remove(0)
    }

    fn predict_batch(
        &mut self,
        reqs: &[GatewayRequest],
    ) -> Vec<Result<GatewayResponse, GatewayError>> {
        let bodies = reqs.iter().cloned().map(WireRequestBody::Predict).collect();
        self.0
            .exchange(bodies)
            .into_iter()
            .map(decode_predict)
            .collect()
    }

    fn embed(&mut self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let body = WireRequestBody::Embed { embed: text.into() };
        decode_embed(self.0.exchange(vec![body]).remove(0))
    }

    fn check_verbalizers(&mut self, label_tokens: &[String]) -> Result<(), GatewayError> {
        let body = WireRequestBody::Verbalizers {
            check_verbalizers: label_tokens.to_vec(),
        };
        decode_ok(self.0.exchange(vec![body]).remove(0))
    }
}

fn parse_response(line: &str) -> Result<WireResponse, GatewayError> {
    let resp: WireResponse = serde_json::from_str(line)
        .map_err(|e| GatewayError::Protocol(format!("malformed response: {e}")))?;
    resp.check_version()?;
    Ok(resp)
}

/// A child process speaking the protocol on stdin/stdout, with up to
/// `window` requests in flight. Responses are matched by id.
pub struct PipeExchange {
    child: Child,
    writer: Option<Sender<String>>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    window: usize,
    timeout: Duration,
    fingerprint: String,
    broken: Option<GatewayError>,
}

pub type PipeGateway = WireGateway<PipeExchange>;

impl PipeGateway {
    /// Spawns `command` through the shell.
    pub fn spawn(command: &str, window: usize, timeout: Duration) -> Result<Self, GatewayError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| GatewayError::Transport(format!("cannot spawn {command:?}: {e}")))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel::<String>();
        thread::spawn(move || {
            let mut stdin = stdin;
            for line in rx {
                if writeln!(stdin, "{line}")
                    .and_then(|()| stdin.flush())
                    .is_err()
                {
                    break;
                }
            }
        });
        let (ltx, lrx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if ltx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(WireGateway(PipeExchange {
            child,
            writer: Some(tx),
            lines: lrx,
            next_id: 0,
            window: window.max(1),
            timeout,
            fingerprint: format!("pipe:{command}"),
            broken: None,
        }))
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.0.fingerprint = fingerprint.into();
        self
    }
}

impl Exchange for PipeExchange {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn exchange(
        &mut self,
        bodies: Vec<WireRequestBody>,
    ) -> Vec<Result<WireResponseBody, GatewayError>> {
        let n = bodies.len();
        let mut results: Vec<Option<Result<WireResponseBody, GatewayError>>> = vec![None; n];
        if let Some(e) = &self.broken {
            return vec![Err(e.clone()); n];
        }
        let mut pending: HashMap<u64, usize> = HashMap::new();
        let mut queue = bodies.into_iter().enumerate();
        let mut done = 0;
        while done < n {
            while pending.len() < self.window {
                let Some((slot, body)) = queue.next() else {
                    break;
                };
                let id = self.next_id;
                self.next_id += 1;
                let line = encode(&WireRequest::new(id, body));
                if self.writer.as_ref().is_none_or(|w| w.send(line).is_err()) {
                    self.broken = Some(GatewayError::Transport("adapter stdin closed".into()));
                    break;
                }
                pending.insert(id, slot);
            }
            if pending.is_empty() {
                break;
            }
            let failure = match self.lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) => {
                    match parse_response(&line) {
                        Ok(resp) => {
                            // Stale ids from an earlier timed-out exchange are dropped.
                            if let Some(slot) = pending.remove(&resp.id) {
                                results[slot] = Some(Ok(resp.body));
                                done += 1;
                            }
                            None
                        }
                        Err(e) => Some(e),
                    }
                }
                Ok(Err(e)) => Some(GatewayError::Transport(format!("adapter stdout: {e}"))),
                Err(RecvTimeoutError::Timeout) => Some(GatewayError::Timeout { attempts: 1 }),
                Err(RecvTimeoutError::Disconnected) => {
                    Some(GatewayError::Transport("adapter exited".into()))
                }
            };
            if let Some(e) = failure {
                self.broken = Some(e);
                break;
            }
        }
        let fallback = self
            .broken
            .clone()
            .unwrap_or_else(|| GatewayError::Transport("request was not sent".into()));
        results
            .into_iter()
            .map(|r| r.unwrap_or_else(|| Err(fallback.clone())))
            .collect()
    }
}

impl Drop for PipeExchange {
    fn drop(&mut self) {
        self.writer.take();
        if self.child.try_wait().ok().flatten().is_none() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

/// POSTs batches of request lines to an HTTP endpoint, retrying transport
/// failures.
pub struct HttpExchange {
    url: String,
    agent: ureq::Agent,
    next_id: u64,
    window: usize,
    attempts: u32,
    fingerprint: String,
}

pub type HttpGateway = WireGateway<HttpExchange>;

impl HttpGateway {
    pub fn new(url: &str, window: usize, timeout: Duration) -> Result<Self, GatewayError> {
        if !url.starts_with("http://") {
            return Err(GatewayError::Transport(format!(
                "{url}: only plain http endpoints are supported; put a local proxy in front of https"
            )));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Ok(WireGateway(HttpExchange {
            url: url.into(),
            agent,
            next_id: 0,
            window: window.max(1),
            attempts: HTTP_ATTEMPTS,
            fingerprint: format!("http:{url}"),
        }))
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.0.fingerprint = fingerprint.into();
        self
    }
}

impl HttpExchange {
    fn post(&self, body: &str) -> Result<String, GatewayError> {
        let mut last = GatewayError::Transport("no attempt made".into());
        for attempt in 1..=self.attempts {
            match self
                .agent
                .post(&self.url)
                .header("Content-Type", "application/x-ndjson")
                .send(body)
            {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| GatewayError::Transport(e.to_string()))
                }
                Err(ureq::Error::Timeout(_)) => last = GatewayError::Timeout { attempts: attempt },
                Err(ureq::Error::StatusCode(code)) if code < 500 => {
                    return Err(GatewayError::Transport(format!("HTTP {code}")))
                }
                Err(e) => last = GatewayError::Transport(e.to_string()),
            }
            thread::sleep(Duration::from_millis(200 * u64::from(attempt)));
        }
        Err(last)
    }
}

impl Exchange for HttpExchange {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn exchange(
        &mut self,
        bodies: Vec<WireRequestBody>,
    ) -> Vec<Result<WireResponseBody, GatewayError>> {
        let mut out = Vec::with_capacity(bodies.len());
        let bodies: Vec<WireRequestBody> = bodies;
        for chunk in bodies.chunks(self.window) {
            let first = self.next_id;
            self.next_id += chunk.len() as u64;
            let payload: String = chunk
                .iter()
                .enumerate()
                .map(|(i, b)| encode(&WireRequest::new(first + i as u64, b.clone())) + "\n")
                .collect();
            let mut slots: Vec<Option<Result<WireResponseBody, GatewayError>>> =
                vec![None; chunk.len()];
            match self.post(&payload) {
                Ok(text) => {
                    for line in text.lines().filter(|l| !l.trim().is_empty()) {
                        match parse_response(line) {
                            Ok(resp) => {
                                let idx = resp.id.wrapping_sub(first) as usize;
                                if let Some(slot) = slots.get_mut(idx) {
                                    *slot = Some(Ok(resp.body));
                                }
                            }
                            Err(e) => {
                                for s in slots.iter_mut().filter(|s| s.is_none()) {
                                    *s = Some(Err(e.clone()));
                                }
                            }
                        }
                    }
                }
                Err(e) => slots.iter_mut().for_each(|s| *s = Some(Err(e.clone()))),
            }
            out.extend(slots.into_iter().map(|s| {
                s.unwrap_or_else(|| Err(GatewayError::Protocol("response line missing".into())))
            }));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use staicc_core::mock::MockModel;

    #[test]
    fn bad_version_and_garbage_get_protocol_errors() {
        let mut gw = MockModel::new(0);
        let r = handle_line(&mut gw, r#"{"version":"staicc/0","id":4,"embed":"x"}"#);
        assert_eq!(r.id, 4);
        assert!(
            matches!(r.body, WireResponseBody::Error { ref error } if error.kind == "protocol")
        );
        let r = handle_line(&mut gw, "{nope");
        assert_eq!(r.id, 0);
        assert!(matches!(r.body, WireResponseBody::Error { .. }));
    }

    #[test]
    fn serve_answers_each_line_in_order() {
        let mut gw = MockModel::new(0);
        let input = concat!(
            r#"{"version":"staicc/1","id":0,"embed":"good film"}"#,
            "\n\n",
            r#"{"version":"staicc/1","id":1,"check_verbalizers":["positive","negative"]}"#,
            "\n"
        );
        let mut out = Vec::new();
        assert_eq!(serve(&mut gw, input.as_bytes(), &mut out).unwrap(), 2);
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<WireResponse> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(matches!(lines[0].body, WireResponseBody::Embedding { .. }));
        assert_eq!(lines[1].body, WireResponseBody::Ok { ok: true });
    }
}
