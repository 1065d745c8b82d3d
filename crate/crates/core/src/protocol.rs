//! Newline-delimited JSON protocol spoken with external model processes.
//!
//! Every request is one line on the child's stdin and is answered by exactly one
//! line on its stdout carrying the same `id`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BBox, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels_b64: String,
    /// Set when the peer acts as a feature detector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_id: Option<String>,
}

impl Request {
    pub fn for_image(id: impl Into<String>, img: &Image, spec_id: Option<&str>) -> Self {
        Self {
            id: id.into(),
            width: img.width(),
            height: img.height(),
            channels: img.channels(),
            pixels_b64: STANDARD.encode(img.data()),
            spec_id: spec_id.map(str::to_owned),
        }
    }

    pub fn decode_image(&self) -> Result<Image> {
        let data = STANDARD
            .decode(&self.pixels_b64)
            .map_err(|e| Error::InvalidImage(format!("bad base64 payload: {e}")))?;
        Image::new(self.id.clone(), self.width, self.height, self.channels, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WirePrediction {
    pub label: String,
    pub confidence: f64,
    pub bbox: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: String,
    pub predictions: Vec<WirePrediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_id: Option<String>,
}

impl Response {
    /// Parses one response line and checks it against the request it answers.
    pub fn parse_for(line: &str, request: &Request) -> Result<Self> {
        let resp: Response = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::BackendUnavailable(format!("malformed response line: {e}")))?;
        if resp.id != request.id {
            return Err(Error::BackendUnavailable(format!(
                "response id `{}` does not answer request `{}`",
                resp.id, request.id
            )));
        }
        if request.spec_id.is_some() && resp.spec_id.is_some() && resp.spec_id != request.spec_id {
            return Err(Error::BackendUnavailable(format!(
                "response spec_id {:?} does not echo {:?}",
                resp.spec_id, request.spec_id
            )));
        }
        for p in &resp.predictions {
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::BackendUnavailable(format!(
                    "confidence {} outside [0, 1]",
                    p.confidence
                )));
            }
            if let Some(b) = p.bbox {
                if b.iter().any(|v| !v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
                    return Err(Error::BackendUnavailable(format!("invalid bbox {b:?}")));
                }
            }
        }
        Ok(resp)
    }
}

/// Converts a floating-point `[x, y, w, h]` box to the smallest pixel box covering it.
pub fn pixel_box(b: [f64; 4]) -> Result<BBox> {
    let x0 = b[0].floor() as i64;
    let y0 = b[1].floor() as i64;
    let x1 = (b[0] + b[2]).ceil() as i64;
    let y1 = (b[1] + b[3]).ceil() as i64;
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A long-running child process answering protocol requests, one at a time.
pub struct SubprocessClient {
    command: String,
    pipe: Mutex<Option<Pipe>>,
    next_id: AtomicU64,
}

impl std::fmt::Debug for SubprocessClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubprocessClient")
            .field("command", &self.command)
            .finish_non_exhaustive()
    }
}

impl SubprocessClient {
    /// Spawns `command` through the platform shell.
    pub fn spawn(command: &str) -> Result<Self> {
        let client = Self {
            command: command.to_owned(),
            pipe: Mutex::new(None),
            next_id: AtomicU64::new(0),
        };
        *client.pipe.lock().expect("fresh mutex") = Some(client.start()?);
        Ok(client)
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    fn start(&self) -> Result<Pipe> {
        let mut cmd = if cfg!(windows) {
            let mut c = Command::new("cmd");
            c.arg("/C");
            c
        } else {
            let mut c = Command::new("sh");
            c.arg("-c");
            c
        };
        let mut child = cmd
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::BackendUnavailable(format!("cannot spawn `{}`: {e}", self.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Pipe {
            child,
            stdin,
            stdout,
        })
    }

    /// Sends one image and waits for its response line.
    pub fn call(&self, img: &Image, spec_id: Option<&str>) -> Result<Response> {
        let id = format!("r{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let request = Request::for_image(id, img, spec_id);
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');

        let mut guard = self.pipe.lock().unwrap_or_else(|p| p.into_inner());
        let pipe = guard
            .as_mut()
            .ok_or_else(|| Error::BackendUnavailable(format!("`{}` has exited", self.command)))?;
        let outcome = exchange(pipe, &line, &request);
        if outcome.is_err() {
            // a desynchronized stream cannot be trusted for later requests
            if let Some(mut dead) = guard.take() {
                let _ = dead.child.kill();
                let _ = dead.child.wait();
            }
        }
        outcome
    }
}

fn exchange(pipe: &mut Pipe, line: &str, request: &Request) -> Result<Response> {
    let broken = |e: std::io::Error| Error::BackendUnavailable(format!("pipe error: {e}"));
    pipe.stdin.write_all(line.as_bytes()).map_err(broken)?;
    pipe.stdin.flush().map_err(broken)?;
    let mut reply = String::new();
    let n = pipe.stdout.read_line(&mut reply).map_err(broken)?;
    if n == 0 {
        return Err(Error::BackendUnavailable("process closed its output".into()));
    }
    Response::parse_for(&reply, request)
}

impl Drop for SubprocessClient {
    fn drop(&mut self) {
        if let Some(mut pipe) = self.pipe.get_mut().unwrap_or_else(|p| p.into_inner()).take() {
            drop(pipe.stdin);
            let _ = pipe.child.kill();
            let _ = pipe.child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> Request {
        let img = Image::new("a1", 2, 1, 1, vec![0, 255]).unwrap();
        Request::for_image("a1", &img, None)
    }

    #[test]
    fn request_encodes_raw_samples() {
        let req = request();
        assert_eq!(req.pixels_b64, "AP8=");
        let json = serde_json::to_value(&req).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"id": "a1", "width": 2, "height": 1, "channels": 1, "pixels_b64": "AP8="})
        );
        assert_eq!(req.decode_image().unwrap().data(), &[0, 255]);
    }

    #[test]
    fn response_validation() {
        let req = request();
        let ok = r#"{"id":"a1","predictions":[{"label":"person","confidence":0.9,"bbox":[1,2,3,4]},{"label":"x","confidence":0.1,"bbox":null}]}"#;
        let resp = Response::parse_for(ok, &req).unwrap();
        assert_eq!(resp.predictions.len(), 2);
        assert!(Response::parse_for(r#"{"id":"zz","predictions":[]}"#, &req).is_err());
        assert!(Response::parse_for("not json", &req).is_err());
        assert!(Response::parse_for(r#"{"id":"a1"}"#, &req).is_err());
        assert!(
            Response::parse_for(r#"{"id":"a1","predictions":[{"label":"p","confidence":1.5,"bbox":null}]}"#, &req)
                .is_err()
        );
    }

    #[test]
    fn fractional_boxes_cover_their_extent() {
        assert_eq!(pixel_box([1.5, 2.0, 3.0, 1.2]).unwrap(), BBox::new(1, 2, 4, 2).unwrap());
        assert!(pixel_box([0.0, 0.0, 0.0, 3.0]).is_err());
    }
}
