// SPDX-License-Identifier: Apache-2.0

//! Minimal blocking HTTP/1.1 client over a unix domain socket.
//!
//! One connection per request (`Connection: close`). Bodies are framed by
//! `Content-Length`, chunked transfer encoding, or end of stream.

use std::io::{self, BufRead, BufReader, Cursor, Read, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("cannot connect to {path}: {source}")]
    Connect { path: String, source: io::Error },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("timed out")]
    TimedOut,
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

fn find_header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

#[derive(Debug, Clone)]
pub struct UnixHttpClient {
    socket: PathBuf,
    timeout: Duration,
}

impl UnixHttpClient {
    pub fn new(socket: impl Into<PathBuf>, timeout: Duration) -> Self {
        Self {
            socket: socket.into(),
            timeout,
        }
    }

    pub fn socket(&self) -> &Path {
        &self.socket
    }

    fn connect(&self) -> Result<UnixStream, HttpError> {
        UnixStream::connect(&self.socket).map_err(|source| HttpError::Connect {
            path: self.socket.display().to_string(),
            source,
        })
    }

    /// Sends a request and reads the whole response body.
    pub fn request(
        &self,
        method: &str,
        path: &str,
        body: Option<&[u8]>,
    ) -> Result<HttpResponse, HttpError> {
        let deadline = Instant::now() + self.timeout;
        let mut stream = self.open(method, path, body, deadline)?;
        let mut buf = Vec::new();
        stream.body.read_to_end(&mut buf).map_err(map_timeout)?;
        Ok(HttpResponse {
            status: stream.status,
            headers: stream.headers,
            body: buf,
        })
    }

    /// Sends a request and returns the status, headers and a body reader
    /// that fails with [`io::ErrorKind::TimedOut`] once `deadline` passes.
    pub fn open(
        &self,
        method: &str,
        path: &str,
        body: Option<&[u8]>,
        deadline: Instant,
    ) -> Result<StreamingResponse, HttpError> {
        let mut stream = self.connect()?;
        stream.set_write_timeout(Some(self.timeout))?;
        let body = body.unwrap_or_default();
        let mut head = format!(
            "{method} {path} HTTP/1.1\r\nHost: docker\r\nUser-Agent: vemul\r\nConnection: close\r\nContent-Length: {}\r\n",
            body.len()
        );
        if !body.is_empty() {
            head.push_str("Content-Type: application/json\r\n");
        }
        head.push_str("\r\n");
        stream.write_all(head.as_bytes())?;
        stream.write_all(body)?;
        stream.flush()?;

        let control = stream.try_clone()?;
        let mut raw = Vec::with_capacity(1024);
        let mut chunk = [0u8; 4096];
        let header_end = loop {
            if let Some(pos) = find_subslice(&raw, b"\r\n\r\n") {
                break pos + 4;
            }
            set_remaining(&control, deadline)?;
            let n = stream.read(&mut chunk).map_err(map_timeout)?;
            if n == 0 {
                return Err(HttpError::Malformed(
                    "connection closed before headers".into(),
                ));
            }
            raw.extend_from_slice(&chunk[..n]);
            if raw.len() > 64 * 1024 {
                return Err(HttpError::Malformed("header section too large".into()));
            }
        };

        let mut header_buf = [httparse::EMPTY_HEADER; 64];
        let mut parsed = httparse::Response::new(&mut header_buf);
        match parsed.parse(&raw[..header_end]) {
            Ok(httparse::Status::Complete(_)) => {}
            Ok(httparse::Status::Partial) => {
                return Err(HttpError::Malformed("partial header".into()))
            }
            Err(e) => return Err(HttpError::Malformed(e.to_string())),
        }
        let status = parsed.code.unwrap_or(0);
        let headers: Vec<(String, String)> = parsed
            .headers
            .iter()
            .map(|h| {
                (
                    h.name.to_string(),
                    String::from_utf8_lossy(h.value).trim().to_string(),
                )
            })
            .collect();

        let framing = if find_header(&headers, "transfer-encoding")
            .is_some_and(|v| v.to_ascii_lowercase().contains("chunked"))
        {
            Framing::Chunked {
                left: 0,
                done: false,
            }
        } else if let Some(len) = find_header(&headers, "content-length") {
            Framing::Length(
                len.parse()
                    .map_err(|_| HttpError::Malformed(format!("bad content-length `{len}`")))?,
            )
        } else if status == 204 || status == 304 {
            Framing::Length(0)
        } else {
            Framing::Eof
        };

        let leftover = raw[header_end..].to_vec();
        let reader = BufReader::new(Cursor::new(leftover).chain(stream));
        Ok(StreamingResponse {
            status,
            headers,
            body: BodyReader {
                inner: reader,
                control,
                framing,
                deadline,
            },
        })
    }
}

fn set_remaining(stream: &UnixStream, deadline: Instant) -> Result<(), HttpError> {
    let left = deadline.saturating_duration_since(Instant::now());
    if left.is_zero() {
        return Err(HttpError::TimedOut);
    }
    stream.set_read_timeout(Some(left))?;
    Ok(())
}

fn map_timeout(e: io::Error) -> HttpError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => HttpError::TimedOut,
        _ => HttpError::Io(e),
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

pub struct StreamingResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: BodyReader,
}

enum Framing {
    Length(u64),
    Chunked { left: u64, done: bool },
    Eof,
}

pub struct BodyReader {
    inner: BufReader<io::Chain<Cursor<Vec<u8>>, UnixStream>>,
    control: UnixStream,
    framing: Framing,
    deadline: Instant,
}

impl BodyReader {
    fn arm(&self) -> io::Result<()> {
        let left = self.deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(io::Error::new(io::ErrorKind::TimedOut, "deadline passed"));
        }
        self.control.set_read_timeout(Some(left))
    }

    fn read_line(&mut self) -> io::Result<String> {
        let mut line = String::new();
        self.inner.read_line(&mut line)?;
        Ok(line)
    }
}

impl Read for BodyReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        // only arm the socket timeout when the buffered bytes are exhausted
        if self.inner.buffer().is_empty() {
            self.arm()?;
        }
        if let Framing::Chunked {
            left: 0,
            done: false,
        } = self.framing
        {
            let line = self.read_line()?;
            if line.is_empty() {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "chunk header missing",
                ));
            }
            let size_text = line.trim().split(';').next().unwrap_or("");
            let size = u64::from_str_radix(size_text, 16).map_err(|_| {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("bad chunk size `{size_text}`"),
                )
            })?;
            if size == 0 {
                // trailers until the blank line
                while !self.read_line()?.trim().is_empty() {}
                self.framing = Framing::Chunked {
                    left: 0,
                    done: true,
                };
                return Ok(0);
            }
            self.framing = Framing::Chunked {
                left: size,
                done: false,
            };
        }
        let n = match &mut self.framing {
            Framing::Eof => return self.inner.read(buf),
            Framing::Length(0) | Framing::Chunked { done: true, .. } => return Ok(0),
            Framing::Length(left) | Framing::Chunked { left, .. } => {
                let cap = (*left).min(buf.len() as u64) as usize;
                let n = self.inner.read(&mut buf[..cap])?;
                if n == 0 {
                    return Err(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "body truncated",
                    ));
                }
                *left -= n as u64;
                n
            }
        };
        if let Framing::Chunked {
            left: 0,
            done: false,
        } = self.framing
        {
            self.read_line()?;
        }
        Ok(n)
    }
}

/// Percent-encodes a query component.
pub fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => {
                out.push(b as char)
            }
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::net::UnixListener;

    fn serve_once(
        reply: &'static [u8],
    ) -> (tempfile::TempDir, PathBuf, std::thread::JoinHandle<Vec<u8>>) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.sock");
        let listener = UnixListener::bind(&path).unwrap();
        let t = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut req = vec![0u8; 4096];
            let n = s.read(&mut req).unwrap();
            s.write_all(reply).unwrap();
            req.truncate(n);
            req
        });
        (dir, path, t)
    }

    #[test]
    fn content_length_body() {
        let (_d, path, t) = serve_once(b"HTTP/1.1 200 OK\r\nContent-Length: 5\r\n\r\nhello");
        let c = UnixHttpClient::new(path, Duration::from_secs(2));
        let r = c.request("GET", "/x", None).unwrap();
        assert_eq!(r.status, 200);
        assert_eq!(r.body, b"hello");
        let req = String::from_utf8(t.join().unwrap()).unwrap();
        assert!(req.starts_with("GET /x HTTP/1.1\r\n"));
    }

    #[test]
    fn chunked_body() {
        let (_d, path, _t) = serve_once(
            b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n4\r\nWiki\r\n5;ext=1\r\npedia\r\n0\r\n\r\n",
        );
        let c = UnixHttpClient::new(path, Duration::from_secs(2));
        let r = c.request("GET", "/x", None).unwrap();
        assert_eq!(r.text(), "Wikipedia");
    }

    #[test]
    fn no_content() {
        let (_d, path, _t) = serve_once(b"HTTP/1.1 204 No Content\r\n\r\n");
        let c = UnixHttpClient::new(path, Duration::from_secs(2));
        let r = c.request("POST", "/x", Some(b"{}")).unwrap();
        assert_eq!(r.status, 204);
        assert!(r.body.is_empty());
    }

    #[test]
    fn missing_socket_is_connect_error() {
        let c = UnixHttpClient::new("/nonexistent/vemul.sock", Duration::from_secs(1));
        assert!(matches!(
            c.request("GET", "/", None),
            Err(HttpError::Connect { .. })
        ));
    }

    #[test]
    fn encodes_filters() {
        assert_eq!(
            percent_encode(r#"{"a":["b=c"]}"#),
            "%7B%22a%22%3A%5B%22b%3Dc%22%5D%7D"
        );
    }
}
