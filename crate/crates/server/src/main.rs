use clap::Parser;
use tokio::net::TcpListener;
use tracing::info;

#[derive(Parser)]
#[command(name = "docsieve-server", version, about = "Serve the docsieve operations over HTTP/JSON")]
struct Args {
    /// Address to listen on.
    #[arg(long, default_value = docsieve_server::DEFAULT_BIND)]
    bind: String,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    let listener = TcpListener::bind(&args.bind).await?;
    info!(addr = %listener.local_addr()?, "listening");
    docsieve_server::serve(listener).await
}
