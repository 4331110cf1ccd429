//! Console server. The kernel runs on its own thread at a fixed tick rate;
//! each client gets a reader and a writer thread. Threads talk to the
//! kernel only through queues, and commands are applied between ticks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::kernel::Kernel;
use super::log::write_records;
use super::protocol::{read_frame, write_frame, CommandError, Frame, FrameError, PROTOCOL_VERSION};
use super::GatewayError;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Ticks per second.
    pub rate: f64,
    /// Optional event log of the session.
    pub log: Option<PathBuf>,
    /// Stop advancing after this many ticks (clients stay connected).
    pub max_ticks: Option<u64>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            rate: 10.0,
            log: None,
            max_ticks: None,
        }
    }
}

enum ToKernel {
    Connect {
        client: u64,
        tx: Sender<Frame>,
    },
    Command {
        client: u64,
        id: u64,
        command: super::protocol::Command,
    },
    Disconnect {
        client: u64,
    },
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    result: Receiver<Result<(), GatewayError>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Stops the kernel and acceptor and waits for them.
    pub fn stop(mut self) -> Result<(), GatewayError> {
        self.stop.store(true, Ordering::SeqCst);
        self.join_all()
    }

    /// Blocks until the server stops on its own (kernel error) or forever.
    pub fn wait(mut self) -> Result<(), GatewayError> {
        self.join_all()
    }

    fn join_all(&mut self) -> Result<(), GatewayError> {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.result.try_recv().unwrap_or(Ok(()))
    }
}

/// Binds `port` (0 picks a free one) and starts serving `kernel`.
pub fn serve(kernel: Kernel, port: u16, opts: ServeOptions) -> Result<ServerHandle, GatewayError> {
    if !(opts.rate > 0.0 && opts.rate.is_finite()) {
        return Err(GatewayError::Config(
            "rate must be a positive number".into(),
        ));
    }
    let listener = TcpListener::bind(("127.0.0.1", port)).map_err(GatewayError::Bind)?;
    let addr = listener.local_addr().map_err(GatewayError::Bind)?;
    listener.set_nonblocking(true).map_err(GatewayError::Bind)?;
    let log = match &opts.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|source| {
            GatewayError::Io {
                path: p.display().to_string(),
                source,
            }
        })?)),
        None => None,
    };
    let stop = Arc::new(AtomicBool::new(false));
    let (to_kernel, from_clients) = mpsc::channel();
    let (result_tx, result) = mpsc::channel();

    let kstop = stop.clone();
    let kernel_thread = thread::spawn(move || {
        let r = kernel_loop(kernel, from_clients, opts, log, &kstop);
        kstop.store(true, Ordering::SeqCst);
        let _ = result_tx.send(r);
    });
    let astop = stop.clone();
    let acceptor = thread::spawn(move || accept_loop(listener, to_kernel, &astop));
    Ok(ServerHandle {
        addr,
        stop,
        threads: vec![kernel_thread, acceptor],
        result,
    })
}

fn accept_loop(listener: TcpListener, to_kernel: Sender<ToKernel>, stop: &AtomicBool) {
    let mut next_client = 1;
    let mut streams: Vec<TcpStream> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let client = next_client;
                next_client += 1;
                if let Ok(s) = stream.try_clone() {
                    streams.push(s);
                }
                spawn_client(client, stream, to_kernel.clone());
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(_) => thread::sleep(Duration::from_millis(5)),
        }
    }
    for s in streams {
        let _ = s.shutdown(Shutdown::Both);
    }
}

fn spawn_client(client: u64, stream: TcpStream, to_kernel: Sender<ToKernel>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let (tx, rx) = mpsc::channel::<Frame>();
    let Ok(mut write_half) = stream.try_clone() else {
        return;
    };
    thread::spawn(move || {
        for frame in rx {
            if write_frame(&mut write_half, &frame).is_err() {
                break;
            }
        }
        let _ = write_half.shutdown(Shutdown::Both);
    });
    if to_kernel
        .send(ToKernel::Connect {
            client,
            tx: tx.clone(),
        })
        .is_err()
    {
        return;
    }
    thread::spawn(move || {
        let mut read_half = stream;
        loop {
            match read_frame(&mut read_half) {
                Ok(Some(Frame::Command { id, command })) => {
                    if to_kernel
                        .send(ToKernel::Command {
                            client,
                            id,
                            command,
                        })
                        .is_err()
                    {
                        break;
                    }
                }
                Ok(Some(other)) => {
                    let detail = format!(
                        "clients may only send Command frames, got {}",
                        frame_name(&other)
                    );
                    let _ = tx.send(Frame::Error {
                        id: None,
                        error: CommandError::Malformed { detail },
                    });
                }
                Err(FrameError::Malformed(detail)) => {
                    let _ = tx.send(Frame::Error {
                        id: None,
                        error: CommandError::Malformed { detail },
                    });
                }
                Ok(None) | Err(_) => break,
            }
        }
        let _ = to_kernel.send(ToKernel::Disconnect { client });
    });
}

fn frame_name(f: &Frame) -> &'static str {
    match f {
        Frame::Hello { .. } => "Hello",
        Frame::Snapshot { .. } => "Snapshot",
        Frame::Event { .. } => "Event",
        Frame::Command { .. } => "Command",
        Frame::Ack { .. } => "Ack",
        Frame::Error { .. } => "Error",
    }
}

fn kernel_loop(
    mut kernel: Kernel,
    inbox: Receiver<ToKernel>,
    opts: ServeOptions,
    mut log: Option<BufWriter<File>>,
    stop: &AtomicBool,
) -> Result<(), GatewayError> {
    let period = Duration::from_secs_f64(1.0 / opts.rate);
    let mut clients: Vec<(u64, Sender<Frame>)> = Vec::new();
    let mut next_tick = Instant::now() + period;
    let mut steps = 0u64;
    // The header goes to the log only; clients get a snapshot instead.
    let header = kernel.take_events();
    if let Some(w) = log.as_mut() {
        let _ = write_records(w, &header).and_then(|_| w.flush());
    }
    let mut publish = |kernel: &mut Kernel,
                       clients: &mut Vec<(u64, Sender<Frame>)>|
     -> Result<(), GatewayError> {
        let records = kernel.take_events();
        if let Some(w) = log.as_mut() {
            write_records(w, &records)
                .and_then(|_| w.flush())
                .map_err(|source| GatewayError::Io {
                    path: "session log".into(),
                    source,
                })?;
        }
        for r in records {
            clients.retain(|(_, tx)| tx.send(Frame::Event { record: r.clone() }).is_ok());
        }
        Ok(())
    };
    while !stop.load(Ordering::SeqCst) {
        let timeout = next_tick.saturating_duration_since(Instant::now());
        match inbox.recv_timeout(timeout.min(Duration::from_millis(50))) {
            Ok(ToKernel::Connect { client, tx }) => {
                let hello = Frame::Hello {
                    protocol: PROTOCOL_VERSION,
                    tick: kernel.tick(),
                };
                let snap = Frame::Snapshot {
                    snapshot: Box::new(kernel.snapshot()),
                };
                if tx.send(hello).is_ok() && tx.send(snap).is_ok() {
                    clients.push((client, tx));
                }
            }
            Ok(ToKernel::Command {
                client,
                id,
                command,
            }) => {
                let reply = match kernel.apply_command(&command, "console") {
                    Ok(ack) => Frame::Ack { id, ack },
                    Err(error) => Frame::Error {
                        id: Some(id),
                        error,
                    },
                };
                if let Some((_, tx)) = clients.iter().find(|(c, _)| *c == client) {
                    let _ = tx.send(reply);
                }
                publish(&mut kernel, &mut clients)?;
            }
            Ok(ToKernel::Disconnect { client }) => clients.retain(|(c, _)| *c != client),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => {
                thread::sleep(timeout.min(Duration::from_millis(50)))
            }
        }
        if Instant::now() >= next_tick {
            next_tick += period;
            if opts.max_ticks.is_none_or(|m| steps < m) {
                kernel.step()?;
                steps += 1;
                publish(&mut kernel, &mut clients)?;
            }
        }
    }
    // Close the session log the way a headless run ends.
    kernel.finish();
    publish(&mut kernel, &mut clients)
}
