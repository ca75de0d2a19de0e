//! TLS endpoints for the virtual device and web server.
//!
//! Real mode runs rustls client and server connections driven as byte
//! pipes. Scripted mode emits record flights of configured sizes with
//! seeded contents; its request and body travel XORed with a keystream both
//! ends derive, so the tunnel never carries them in the clear.

use std::io::{self, Read, Write};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName};
use rustls::{ClientConfig, ClientConnection, RootCertStore, ServerConfig, ServerConnection};
use thiserror::Error;

use crate::scenario::SimTlsConfig;

const CT_CHANGE_CIPHER_SPEC: u8 = 20;
const CT_ALERT: u8 = 21;
const CT_HANDSHAKE: u8 = 22;
const CT_APPLICATION_DATA: u8 = 23;
/// Inner content type byte plus AEAD tag on protected records.
const PROTECTION_OVERHEAD: usize = 17;

#[derive(Debug, Error)]
pub enum TlsError {
    #[error("tls: {0}")]
    Rustls(#[from] rustls::Error),
    #[error("certificate: {0}")]
    Certificate(#[from] rcgen::Error),
    #[error("tls io: {0}")]
    Io(#[from] io::Error),
    #[error("http: {0}")]
    Http(#[from] httparse::Error),
    #[error("unexpected {0}")]
    Protocol(&'static str),
}

/// Client half: started by the device once TCP is up.
pub trait TlsClientEnd {
    /// First flight.
    fn start(&mut self) -> Result<Vec<u8>, TlsError>;
    /// Bytes from the server; returns bytes to send back.
    fn on_bytes(&mut self, data: &[u8]) -> Result<Vec<u8>, TlsError>;
    /// The handshake finished and the request was written.
    fn handshake_complete(&self) -> bool;
    /// The full response body, once received.
    fn body(&self) -> Option<&[u8]>;
}

/// Server half: answers one GET with the configured body, then closes.
pub trait TlsServerEnd {
    fn on_bytes(&mut self, data: &[u8]) -> Result<Vec<u8>, TlsError>;
    /// Response and closure alert are written.
    fn finished(&self) -> bool;
}

pub fn http_request(host: &str, path: &str) -> Vec<u8> {
    format!("GET {path} HTTP/1.1\r\nHost: {host}\r\nAccept: application/json\r\nConnection: close\r\n\r\n").into_bytes()
}

pub fn http_response(body: &[u8]) -> Vec<u8> {
    let mut out = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )
    .into_bytes();
    out.extend_from_slice(body);
    out
}

/// Body of a complete response in `buffer`, if it is all there.
fn parse_response(buffer: &[u8]) -> Result<Option<Vec<u8>>, TlsError> {
    let mut headers = [httparse::EMPTY_HEADER; 16];
    let mut response = httparse::Response::new(&mut headers);
    let httparse::Status::Complete(head) = response.parse(buffer)? else { return Ok(None) };
    let length = response
        .headers
        .iter()
        .find(|h| h.name.eq_ignore_ascii_case("content-length"))
        .and_then(|h| std::str::from_utf8(h.value).ok()?.trim().parse::<usize>().ok())
        .ok_or(TlsError::Protocol("response without content length"))?;
    Ok((buffer.len() >= head + length).then(|| buffer[head..head + length].to_vec()))
}

fn request_complete(buffer: &[u8]) -> Result<bool, TlsError> {
    let mut headers = [httparse::EMPTY_HEADER; 16];
    let mut request = httparse::Request::new(&mut headers);
    Ok(request.parse(buffer)?.is_complete())
}

/// Reads whatever plaintext is available without blocking.
fn read_available(reader: &mut impl Read, into: &mut Vec<u8>) -> Result<(), TlsError> {
    let mut buf = [0u8; 4096];
    loop {
        match reader.read(&mut buf) {
            Ok(0) => return Ok(()),
            Ok(n) => into.extend_from_slice(&buf[..n]),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(()),
            Err(e) => return Err(e.into()),
        }
    }
}

/// Certificates and configurations shared by every real-mode connection.
#[derive(Clone)]
pub struct RealTlsContext {
    server: Arc<ServerConfig>,
    client: Arc<ClientConfig>,
    server_name: ServerName<'static>,
}

impl RealTlsContext {
    /// Issues a self-signed certificate for `host` and builds TLS 1.3 only
    /// configurations trusting it.
    pub fn new(host: &str) -> Result<Self, TlsError> {
        let issued = rcgen::generate_simple_self_signed(vec![host.to_string()])?;
        let cert: CertificateDer<'static> = issued.cert.der().clone();
        let key = PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(issued.signing_key.serialize_der()));
        let provider = Arc::new(rustls::crypto::ring::default_provider());

        let mut server = ServerConfig::builder_with_provider(provider.clone())
            .with_protocol_versions(&[&rustls::version::TLS13])?
            .with_no_client_auth()
            .with_single_cert(vec![cert.clone()], key)?;
        // keep the flight to the handshake itself
        server.send_tls13_tickets = 0;

        let mut roots = RootCertStore::empty();
        roots.add(cert)?;
        let client = ClientConfig::builder_with_provider(provider)
            .with_protocol_versions(&[&rustls::version::TLS13])?
            .with_root_certificates(roots)
            .with_no_client_auth();
        let server_name = ServerName::try_from(host.to_string())
            .map_err(|_| TlsError::Protocol("host is not a valid server name"))?;
        Ok(RealTlsContext { server: Arc::new(server), client: Arc::new(client), server_name })
    }
}

pub struct RealTlsClient {
    conn: ClientConnection,
    request: Vec<u8>,
    request_sent: bool,
    plaintext: Vec<u8>,
    body: Option<Vec<u8>>,
}

impl RealTlsClient {
    pub fn new(context: &RealTlsContext, request: Vec<u8>) -> Result<Self, TlsError> {
        let conn = ClientConnection::new(context.client.clone(), context.server_name.clone())?;
        Ok(RealTlsClient { conn, request, request_sent: false, plaintext: Vec::new(), body: None })
    }

    fn drain(&mut self) -> Result<Vec<u8>, TlsError> {
        let mut out = Vec::new();
        while self.conn.wants_write() {
            self.conn.write_tls(&mut out)?;
        }
        Ok(out)
    }
}

impl TlsClientEnd for RealTlsClient {
    fn start(&mut self) -> Result<Vec<u8>, TlsError> {
        self.drain()
    }

    fn on_bytes(&mut self, mut data: &[u8]) -> Result<Vec<u8>, TlsError> {
        while !data.is_empty() {
            self.conn.read_tls(&mut data)?;
            self.conn.process_new_packets()?;
        }
        if !self.conn.is_handshaking() && !self.request_sent {
            self.conn.writer().write_all(&self.request)?;
            self.request_sent = true;
        }
        read_available(&mut self.conn.reader(), &mut self.plaintext)?;
        if self.body.is_none() {
            self.body = parse_response(&self.plaintext)?;
        }
        self.drain()
    }

    fn handshake_complete(&self) -> bool {
        self.request_sent
    }

    fn body(&self) -> Option<&[u8]> {
        self.body.as_deref()
    }
}

pub struct RealTlsServer {
    conn: ServerConnection,
    body: Vec<u8>,
    request: Vec<u8>,
    finished: bool,
}

impl RealTlsServer {
    pub fn new(context: &RealTlsContext, body: Vec<u8>) -> Result<Self, TlsError> {
        let conn = ServerConnection::new(context.server.clone())?;
        Ok(RealTlsServer { conn, body, request: Vec::new(), finished: false })
    }
}

impl TlsServerEnd for RealTlsServer {
    fn on_bytes(&mut self, mut data: &[u8]) -> Result<Vec<u8>, TlsError> {
        while !data.is_empty() {
            self.conn.read_tls(&mut data)?;
            self.conn.process_new_packets()?;
        }
        read_available(&mut self.conn.reader(), &mut self.request)?;
        if !self.finished && request_complete(&self.request)? {
            self.conn.writer().write_all(&http_response(&self.body))?;
            self.conn.send_close_notify();
            self.finished = true;
        }
        let mut out = Vec::new();
        while self.conn.wants_write() {
            self.conn.write_tls(&mut out)?;
        }
        Ok(out)
    }

    fn finished(&self) -> bool {
        self.finished
    }
}

/// Record layout of the scripted exchange. `key` ties the two ends of one
/// connection to the same contents and keystream.
#[derive(Debug, Clone)]
pub struct ScriptedTls {
    pub sizes: SimTlsConfig,
    pub seed: u64,
}

impl ScriptedTls {
    fn rng(&self, key: u32, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (u64::from(key) << 16));
        rng.set_stream(stream);
        rng
    }

    fn record(content_type: u8, version: u16, body: Vec<u8>) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + body.len());
        out.push(content_type);
        out.extend_from_slice(&version.to_be_bytes());
        out.extend_from_slice(&(body.len() as u16).to_be_bytes());
        out.extend(body);
        out
    }

    fn filler(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
        let mut body = vec![0u8; len];
        rng.fill_bytes(&mut body);
        body
    }

    /// Protected record carrying `plaintext` XORed with the connection's
    /// keystream.
    fn sealed(&self, key: u32, stream: u64, plaintext: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut keystream = self.rng(key, stream);
        let mut body: Vec<u8> = plaintext.iter().map(|b| b ^ keystream.random::<u8>()).collect();
        body.push(CT_APPLICATION_DATA ^ keystream.random::<u8>());
        body.extend(Self::filler(rng, PROTECTION_OVERHEAD - 1));
        Self::record(CT_APPLICATION_DATA, 0x0303, body)
    }

    fn open(&self, key: u32, stream: u64, body: &[u8], len: usize) -> Vec<u8> {
        let mut keystream = self.rng(key, stream);
        body[..len].iter().map(|b| b ^ keystream.random::<u8>()).collect()
    }

    fn client_hello_len(&self) -> usize {
        5 + self.sizes.client_hello
    }

    fn server_flight_len(&self) -> usize {
        (5 + self.sizes.server_hello) + 6 + (5 + self.sizes.server_encrypted)
    }

    fn client_flight_len(&self, request_len: usize) -> usize {
        6 + (5 + self.sizes.client_finished) + (5 + request_len + PROTECTION_OVERHEAD)
    }

    fn response_len(&self, body_len: usize) -> usize {
        5 + self.sizes.response_headers + body_len + PROTECTION_OVERHEAD
    }
}

const STREAM_REQUEST: u64 = 1;
const STREAM_RESPONSE: u64 = 2;

pub struct ScriptedTlsClient {
    script: ScriptedTls,
    key: u32,
    request: Vec<u8>,
    body_len: usize,
    rng: ChaCha8Rng,
    received: Vec<u8>,
    handshake_done: bool,
    body: Option<Vec<u8>>,
}

impl ScriptedTlsClient {
    pub fn new(script: ScriptedTls, key: u32, request: Vec<u8>, body_len: usize) -> Self {
        let rng = script.rng(key, 3);
        ScriptedTlsClient {
            script,
            key,
            request,
            body_len,
            rng,
            received: Vec::new(),
            handshake_done: false,
            body: None,
        }
    }
}

impl TlsClientEnd for ScriptedTlsClient {
    fn start(&mut self) -> Result<Vec<u8>, TlsError> {
        let body = ScriptedTls::filler(&mut self.rng, self.script.sizes.client_hello);
        Ok(ScriptedTls::record(CT_HANDSHAKE, 0x0301, body))
    }

    fn on_bytes(&mut self, data: &[u8]) -> Result<Vec<u8>, TlsError> {
        self.received.extend_from_slice(data);
        let flight = self.script.server_flight_len();
        let mut out = Vec::new();
        if !self.handshake_done && self.received.len() >= flight {
            self.handshake_done = true;
            out.extend(ScriptedTls::record(CT_CHANGE_CIPHER_SPEC, 0x0303, vec![1]));
            let finished = ScriptedTls::filler(&mut self.rng, self.script.sizes.client_finished);
            out.extend(ScriptedTls::record(CT_APPLICATION_DATA, 0x0303, finished));
            out.extend(self.script.sealed(self.key, STREAM_REQUEST, &self.request, &mut self.rng));
        }
        let response_end = flight + self.script.response_len(self.body_len);
        if self.body.is_none() && self.received.len() >= response_end {
            let record = &self.received[flight..response_end];
            if record[0] != CT_APPLICATION_DATA {
                return Err(TlsError::Protocol("record type for the response"));
            }
            let plain = self.script.open(
                self.key,
                STREAM_RESPONSE,
                &record[5..],
                self.script.sizes.response_headers + self.body_len,
            );
            self.body = Some(plain[self.script.sizes.response_headers..].to_vec());
        }
        Ok(out)
    }

    fn handshake_complete(&self) -> bool {
        self.handshake_done
    }

    fn body(&self) -> Option<&[u8]> {
        self.body.as_deref()
    }
}

pub struct ScriptedTlsServer {
    script: ScriptedTls,
    key: u32,
    request_len: usize,
    body: Vec<u8>,
    rng: ChaCha8Rng,
    received: usize,
    sent_flight: bool,
    finished: bool,
}

impl ScriptedTlsServer {
    pub fn new(script: ScriptedTls, key: u32, request_len: usize, body: Vec<u8>) -> Self {
        let rng = script.rng(key, 4);
        ScriptedTlsServer { script, key, request_len, body, rng, received: 0, sent_flight: false, finished: false }
    }
}

impl TlsServerEnd for ScriptedTlsServer {
    fn on_bytes(&mut self, data: &[u8]) -> Result<Vec<u8>, TlsError> {
        self.received += data.len();
        let mut out = Vec::new();
        let hello = self.script.client_hello_len();
        if !self.sent_flight && self.received >= hello {
            self.sent_flight = true;
            let sizes = &self.script.sizes;
            out.extend(ScriptedTls::record(
                CT_HANDSHAKE,
                0x0303,
                ScriptedTls::filler(&mut self.rng, sizes.server_hello),
            ));
            out.extend(ScriptedTls::record(CT_CHANGE_CIPHER_SPEC, 0x0303, vec![1]));
            let encrypted = ScriptedTls::filler(&mut self.rng, sizes.server_encrypted);
            out.extend(ScriptedTls::record(CT_APPLICATION_DATA, 0x0303, encrypted));
        }
        if !self.finished && self.received >= hello + self.script.client_flight_len(self.request_len) {
            self.finished = true;
            let mut plain = ScriptedTls::filler(&mut self.rng, self.script.sizes.response_headers);
            plain.extend_from_slice(&self.body);
            out.extend(self.script.sealed(self.key, STREAM_RESPONSE, &plain, &mut self.rng));
            let alert = ScriptedTls::filler(&mut self.rng, 2 + PROTECTION_OVERHEAD);
            out.extend(ScriptedTls::record(CT_ALERT, 0x0303, alert));
        }
        Ok(out)
    }

    fn finished(&self) -> bool {
        self.finished
    }
}

/// Builds matching client and server ends for either mode.
#[derive(Clone)]
pub enum TlsFactory {
    Real { context: RealTlsContext, host: String, path: String, body: Vec<u8> },
    Scripted { script: ScriptedTls, host: String, path: String, body: Vec<u8> },
}

impl TlsFactory {
    pub fn client(&self, key: u32) -> Result<Box<dyn TlsClientEnd>, TlsError> {
        Ok(match self {
            TlsFactory::Real { context, host, path, .. } => {
                Box::new(RealTlsClient::new(context, http_request(host, path))?)
            }
            TlsFactory::Scripted { script, host, path, body } => {
                Box::new(ScriptedTlsClient::new(script.clone(), key, http_request(host, path), body.len()))
            }
        })
    }

    pub fn server(&self, key: u32) -> Result<Box<dyn TlsServerEnd>, TlsError> {
        Ok(match self {
            TlsFactory::Real { context, body, .. } => Box::new(RealTlsServer::new(context, body.clone())?),
            TlsFactory::Scripted { script, host, path, body } => {
                Box::new(ScriptedTlsServer::new(script.clone(), key, http_request(host, path).len(), body.clone()))
            }
        })
    }
}
