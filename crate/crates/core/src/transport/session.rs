//! Session setup: a full mesh of three links plus the Hello/Config handshake.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use super::channel::{Loopback, TcpTransport};
use super::frame::{MessageKind, SessionId};
use super::link::{Link, LinkStats, Tap};
use super::throttle::ThrottleSpec;
use crate::error::{Error, Result};
use crate::role::RoleId;

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_STEP_TIMEOUT: Duration = Duration::from_secs(120);

/// SHA-256 of a canonical configuration text.
pub type ConfigDigest = [u8; 32];

pub fn session_id_for(digest: &ConfigDigest) -> SessionId {
    let mut h = Sha256::new();
    h.update(b"p2n2-session");
    h.update(digest);
    let full: [u8; 32] = h.finalize().into();
    let mut id = [0u8; 16];
    id.copy_from_slice(&full[..16]);
    id
}

/// The two links a role holds, indexed by peer.
#[derive(Debug)]
pub struct Mesh {
    role: RoleId,
    links: [Option<Link>; 3],
}

impl Mesh {
    pub fn new(role: RoleId, links: Vec<Link>) -> Result<Mesh> {
        let mut slots: [Option<Link>; 3] = [None, None, None];
        for l in links {
            if l.local() != role || l.peer() == role {
                return Err(Error::Protocol(format!(
                    "link {}->{} does not belong to {role}",
                    l.local(),
                    l.peer()
                )));
            }
            let i = l.peer().index();
            if slots[i].is_some() {
                return Err(Error::Protocol(format!("duplicate link to {}", l.peer())));
            }
            slots[i] = Some(l);
        }
        let missing: Vec<_> = RoleId::ALL
            .iter()
            .filter(|r| **r != role && slots[r.index()].is_none())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Protocol(format!("{role} is missing links to {missing:?}")));
        }
        Ok(Mesh { role, links: slots })
    }

    pub fn role(&self) -> RoleId {
        self.role
    }

    pub fn link(&mut self, peer: RoleId) -> &mut Link {
        self.links[peer.index()]
            .as_mut()
            .unwrap_or_else(|| panic!("{} has no link to itself", self.role))
    }

    pub fn peers(&self) -> impl Iterator<Item = RoleId> + '_ {
        RoleId::ALL.into_iter().filter(move |r| *r != self.role)
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.links.iter_mut().flatten().for_each(|l| l.set_timeout(timeout));
    }

    pub fn set_throttle(&mut self, spec: ThrottleSpec) {
        self.links.iter_mut().flatten().for_each(|l| l.set_throttle(spec));
    }

    pub fn set_tap(&mut self, tap: Option<Tap>) {
        self.links.iter_mut().flatten().for_each(|l| l.set_tap(tap.clone()));
    }

    /// Sends Abort to every peer (best effort).
    pub fn abort_all(&mut self, reason: &str) {
        self.links.iter_mut().flatten().for_each(|l| l.abort(reason));
    }

    /// Outbound statistics summed over both links.
    pub fn stats(&self) -> LinkStats {
        let mut s = LinkStats::default();
        self.links.iter().flatten().for_each(|l| s.merge(l.stats()));
        s
    }

    /// Runs Hello/Config against both peers. `info` is this role's announcement
    /// (for example its data shape); the peers' announcements are returned
    /// indexed by role.
    pub fn handshake(&mut self, digest: &ConfigDigest, info: &str, timeout: Duration) -> Result<[String; 3]> {
        let mut saved = [Duration::ZERO; 3];
        for (i, l) in self.links.iter_mut().enumerate() {
            if let Some(l) = l {
                saved[i] = l.timeout();
                l.set_timeout(timeout);
            }
        }
        let result = self.handshake_inner(digest, info);
        for (i, l) in self.links.iter_mut().enumerate() {
            if let Some(l) = l {
                l.set_timeout(saved[i]);
            }
        }
        if let Err(e) = &result {
            self.abort_all(&format!("handshake failed: {e}"));
        }
        result
    }

    fn handshake_inner(&mut self, digest: &ConfigDigest, info: &str) -> Result<[String; 3]> {
        let role = self.role;
        let peers: Vec<RoleId> = self.peers().collect();
        for &p in &peers {
            let mut hello = vec![role.code()];
            hello.extend_from_slice(digest);
            self.link(p).send_frame(MessageKind::Hello, hello)?;
        }
        for &p in &peers {
            let hello = self.link(p).recv_frame(MessageKind::Hello)?;
            if hello.len() != 33 {
                return Err(Error::Protocol(format!("Hello from {p} has {} bytes", hello.len())));
            }
            if RoleId::from_code(hello[0]) != Some(p) {
                return Err(Error::Protocol(format!(
                    "peer on the {p} link announced role code {}",
                    hello[0]
                )));
            }
            if hello[1..] != digest[..] {
                return Err(Error::DigestMismatch {
                    peer: p.to_string(),
                    ours: hex::encode(digest),
                    theirs: hex::encode(&hello[1..]),
                });
            }
            self.link(p).set_session(session_id_for(digest));
        }
        for &p in &peers {
            self.link(p).send_frame(MessageKind::Config, info.as_bytes().to_vec())?;
        }
        let mut out: [String; 3] = Default::default();
        out[role.index()] = info.to_string();
        for &p in &peers {
            let payload = self.link(p).recv_frame(MessageKind::Config)?;
            out[p.index()] = String::from_utf8(payload)
                .map_err(|_| Error::Protocol(format!("Config from {p} is not UTF-8")))?;
        }
        Ok(out)
    }
}

/// Three meshes wired together with in-process channels, in role order.
pub fn loopback_mesh(timeout: Duration) -> [Mesh; 3] {
    use RoleId::*;
    let (ab, ba) = Loopback::pair();
    let (as_, sa) = Loopback::pair();
    let (bs, sb) = Loopback::pair();
    let link = |l, p, t: Loopback| Link::new(l, p, Box::new(t), timeout);
    [
        Mesh::new(HolderA, vec![link(HolderA, HolderB, ab), link(HolderA, Server, as_)]).unwrap(),
        Mesh::new(HolderB, vec![link(HolderB, HolderA, ba), link(HolderB, Server, bs)]).unwrap(),
        Mesh::new(Server, vec![link(Server, HolderA, sa), link(Server, HolderB, sb)]).unwrap(),
    ]
}

/// Network addresses of the three roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoints {
    addrs: [String; 3],
}

impl Endpoints {
    pub fn new(holder_a: impl Into<String>, holder_b: impl Into<String>, server: impl Into<String>) -> Self {
        Endpoints {
            addrs: [holder_a.into(), holder_b.into(), server.into()],
        }
    }

    /// Parses `holder-a=host:port,holder-b=host:port,server=host:port`.
    pub fn parse(s: &str) -> Result<Endpoints> {
        let mut addrs: [Option<String>; 3] = Default::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("peer entry `{part}` is not role=addr")))?;
            let role: RoleId = k.trim().parse()?;
            addrs[role.index()] = Some(v.trim().to_string());
        }
        let [a, b, srv] = addrs;
        match (a, b, srv) {
            (Some(a), Some(b), Some(srv)) => Ok(Endpoints { addrs: [a, b, srv] }),
            _ => Err(Error::Config(format!(
                "peers must name holder-a, holder-b and server: `{s}`"
            ))),
        }
    }

    pub fn addr(&self, role: RoleId) -> &str {
        &self.addrs[role.index()]
    }

    pub fn set_addr(&mut self, role: RoleId, addr: impl Into<String>) {
        self.addrs[role.index()] = addr.into();
    }
}

impl std::fmt::Display for Endpoints {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = RoleId::ALL
            .iter()
            .map(|r| format!("{}={}", r, self.addr(*r)))
            .collect();
        f.write_str(&parts.join(","))
    }
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .map_err(|e| Error::Config(format!("cannot resolve `{addr}`: {e}")))?
        .next()
        .ok_or_else(|| Error::Config(format!("`{addr}` resolves to nothing")))
}

fn connect_with_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpStream> {
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(Error::Timeout {
                after: DEFAULT_HANDSHAKE_TIMEOUT,
                peer: addr.to_string(),
                waiting_for: "connection".into(),
            });
        }
        match TcpStream::connect_timeout(&addr, left.min(Duration::from_secs(1))) {
            Ok(s) => return Ok(s),
            Err(_) => std::thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn accept_before(listener: &TcpListener, deadline: Instant) -> Result<TcpStream> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                return Ok(s);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Timeout {
                        after: DEFAULT_HANDSHAKE_TIMEOUT,
                        peer: listener.local_addr().map(|a| a.to_string()).unwrap_or_default(),
                        waiting_for: "incoming connection".into(),
                    });
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Builds this role's side of the TCP mesh. Holder A dials both peers, holder
/// B dials the server, and the dialled side learns who connected from the
/// first byte (the caller's role code), which precedes the framed stream.
pub fn tcp_mesh(
    role: RoleId,
    listener: Option<&TcpListener>,
    peers: &Endpoints,
    connect_timeout: Duration,
    step_timeout: Duration,
) -> Result<Mesh> {
    let deadline = Instant::now() + connect_timeout;
    let dials: &[RoleId] = match role {
        RoleId::HolderA => &[RoleId::HolderB, RoleId::Server],
        RoleId::HolderB => &[RoleId::Server],
        RoleId::Server => &[],
    };
    let accepts = 2 - dials.len();
    let mut links = Vec::new();
    for &p in dials {
        let mut s = connect_with_retry(resolve(peers.addr(p))?, deadline)?;
        io::Write::write_all(&mut s, &[role.code()])?;
        links.push(Link::new(role, p, Box::new(TcpTransport::new(s)?), step_timeout));
    }
    if accepts > 0 {
        let listener = listener.ok_or_else(|| Error::Config(format!("{role} needs a listen address")))?;
        for _ in 0..accepts {
            let mut s = accept_before(listener, deadline)?;
            s.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1))))?;
            let mut code = [0u8; 1];
            io::Read::read_exact(&mut s, &mut code)?;
            let p = RoleId::from_code(code[0])
                .filter(|p| *p != role)
                .ok_or_else(|| Error::Protocol(format!("unknown caller role code {}", code[0])))?;
            links.push(Link::new(role, p, Box::new(TcpTransport::new(s)?), step_timeout));
        }
    }
    Mesh::new(role, links)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digest(tag: &str) -> ConfigDigest {
        Sha256::digest(tag.as_bytes()).into()
    }

    #[test]
    fn endpoints_round_trip() {
        let e = Endpoints::parse("holder-a=127.0.0.1:1,holder-b=127.0.0.1:2, server=h:3").unwrap();
        assert_eq!(e.addr(RoleId::Server), "h:3");
        assert_eq!(Endpoints::parse(&e.to_string()).unwrap(), e);
        assert!(Endpoints::parse("holder-a=x:1").is_err());
    }

    #[test]
    fn loopback_handshake_agrees() {
        let meshes = loopback_mesh(Duration::from_secs(5));
        let d = digest("same");
        let handles: Vec<_> = meshes
            .into_iter()
            .map(|mut m| {
                std::thread::spawn(move || {
                    let info = m.role().to_string();
                    let r = m.handshake(&d, &info, Duration::from_secs(5));
                    (m, r)
                })
            })
            .collect();
        for h in handles {
            let (mut m, r) = h.join().unwrap();
            let infos = r.unwrap();
            assert_eq!(infos[2], "server");
            for p in [RoleId::HolderA, RoleId::HolderB, RoleId::Server] {
                if p != m.role() {
                    assert_eq!(m.link(p).session(), session_id_for(&d));
                }
            }
        }
    }
}
