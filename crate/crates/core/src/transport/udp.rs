use std::io::ErrorKind;
use std::net::UdpSocket;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{Datagram, Endpoint, EndpointStats, Transport, TransportError, MAX_DATAGRAM};
use crate::onion::Address;

/// Real UDP sockets. Loss is possible and only visible as missing datagrams.
#[derive(Debug, Default, Clone)]
pub struct UdpTransport {
    dropped: Arc<AtomicU64>,
}

impl UdpTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for UdpTransport {
    fn bind(&self, address: Address) -> Result<Arc<dyn Endpoint>, TransportError> {
        let socket = UdpSocket::bind(address.socket_addr()).map_err(|e| match e.kind() {
            ErrorKind::AddrInUse => TransportError::AddressInUse(address),
            _ => TransportError::Io(e),
        })?;
        socket.set_nonblocking(true)?;
        let local = socket.local_addr()?;
        let address = Address::from_socket_addr(local)
            .ok_or_else(|| TransportError::NotIpv4(local.to_string()))?;
        Ok(Arc::new(UdpEndpoint {
            socket,
            address,
            transport_dropped: self.dropped.clone(),
            sent: AtomicU64::new(0),
            received: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        }))
    }

    fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    fn in_flight(&self) -> Option<u64> {
        None
    }
}

pub struct UdpEndpoint {
    socket: UdpSocket,
    address: Address,
    transport_dropped: Arc<AtomicU64>,
    sent: AtomicU64,
    received: AtomicU64,
    dropped: AtomicU64,
}

impl UdpEndpoint {
    fn recv_now(&self) -> Option<Datagram> {
        let mut buf = vec![0u8; MAX_DATAGRAM];
        loop {
            match self.socket.recv_from(&mut buf) {
                Ok((n, from)) => {
                    // IPv6 peers cannot be addressed in this tunnel.
                    let Some(source) = Address::from_socket_addr(from) else {
                        continue;
                    };
                    buf.truncate(n);
                    self.received.fetch_add(1, Ordering::Relaxed);
                    return Some(Datagram {
                        source,
                        payload: buf,
                    });
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                // Includes WouldBlock and ICMP-triggered errors on Linux.
                Err(_) => return None,
            }
        }
    }

    #[cfg(unix)]
    fn wait_readable(&self, timeout: Duration) -> bool {
        use std::os::fd::AsRawFd;
        let mut fds = libc::pollfd {
            fd: self.socket.as_raw_fd(),
            events: libc::POLLIN,
            revents: 0,
        };
        let ms = timeout.as_millis().min(i32::MAX as u128) as i32;
        // SAFETY: one valid pollfd for a socket we own.
        let rc = unsafe { libc::poll(&mut fds, 1, ms) };
        rc > 0
    }

    #[cfg(not(unix))]
    fn wait_readable(&self, timeout: Duration) -> bool {
        std::thread::sleep(timeout.min(Duration::from_millis(1)));
        true
    }
}

impl Endpoint for UdpEndpoint {
    fn local_address(&self) -> Address {
        self.address
    }

    fn send_to(&self, dest: Address, payload: Vec<u8>) -> Result<(), TransportError> {
        if payload.len() > MAX_DATAGRAM {
            return Err(TransportError::Oversize(payload.len()));
        }
        self.sent.fetch_add(1, Ordering::Relaxed);
        loop {
            match self.socket.send_to(&payload, dest.socket_addr()) {
                Ok(_) => return Ok(()),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(_) => {
                    self.dropped.fetch_add(1, Ordering::Relaxed);
                    self.transport_dropped.fetch_add(1, Ordering::Relaxed);
                    return Ok(());
                }
            }
        }
    }

    fn try_recv(&self) -> Option<Datagram> {
        self.recv_now()
    }

    fn recv_timeout(&self, timeout: Duration) -> Option<Datagram> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(d) = self.recv_now() {
                return Some(d);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() || !self.wait_readable(left) {
                return self.recv_now();
            }
        }
    }

    fn stats(&self) -> EndpointStats {
        EndpointStats {
            sent: self.sent.load(Ordering::Relaxed),
            received: self.received.load(Ordering::Relaxed),
            dropped: self.dropped.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loopback_round_trip() {
        let t = UdpTransport::new();
        let a = t.bind(Address::localhost(0)).unwrap();
        let b = t.bind(Address::localhost(0)).unwrap();
        a.send_to(b.local_address(), b"hello".to_vec()).unwrap();
        let d = b.recv_timeout(Duration::from_secs(2)).unwrap();
        assert_eq!(d.payload, b"hello");
        assert_eq!(d.source, a.local_address());
    }

    #[test]
    fn double_bind_fails() {
        let t = UdpTransport::new();
        let a = t.bind(Address::localhost(0)).unwrap();
        assert!(matches!(
            t.bind(a.local_address()),
            Err(TransportError::AddressInUse(_))
        ));
    }

    #[test]
    fn recv_times_out_when_idle() {
        let t = UdpTransport::new();
        let a = t.bind(Address::localhost(0)).unwrap();
        let start = Instant::now();
        assert!(a.recv_timeout(Duration::from_millis(20)).is_none());
        assert!(start.elapsed() >= Duration::from_millis(15));
    }
}
