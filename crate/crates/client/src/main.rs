use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use codeaudit_client::api::{ApplyCode, CreateCode, ResolveDisagreement};
use codeaudit_client::{AlertFilter, Client};
use serde::Serialize;
use uuid::Uuid;

#[derive(Parser)]
#[command(
    name = "codeaudit",
    version,
    about = "Command-line client for the codeaudit service"
)]
struct Cli {
    /// Service root URL.
    #[arg(
        long,
        env = "CODEAUDIT_URL",
        default_value = "http://127.0.0.1:8080",
        global = true
    )]
    url: String,
    /// Session token from `codeaudit login`.
    #[arg(long, env = "CODEAUDIT_TOKEN", hide_env_values = true, global = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an account.
    Register {
        username: String,
        #[arg(long, env = "CODEAUDIT_PASSWORD", hide_env_values = true)]
        password: String,
    },
    /// Log in and print a session token.
    Login {
        username: String,
        #[arg(long, env = "CODEAUDIT_PASSWORD", hide_env_values = true)]
        password: String,
    },
    Me,
    Projects,
    CreateProject {
        name: String,
        /// JSON object of settings overrides.
        #[arg(long)]
        settings: Option<String>,
    },
    AddMember {
        project: Uuid,
        username: String,
    },
    Settings {
        project: Uuid,
        /// JSON object to merge into the current settings.
        #[arg(long)]
        set: Option<String>,
    },
    /// Upload a UTF-8 text file as a document.
    Upload {
        project: Uuid,
        file: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    Documents {
        project: Uuid,
    },
    Codes {
        project: Uuid,
    },
    CreateCode {
        project: Uuid,
        name: String,
        #[arg(long)]
        definition: Option<String>,
        #[arg(long)]
        color: Option<String>,
    },
    /// Code the characters `[start, end)` of a document.
    Apply {
        project: Uuid,
        document: Uuid,
        start: usize,
        end: usize,
        #[arg(required = true)]
        codes: Vec<Uuid>,
    },
    Segments {
        project: Uuid,
    },
    Alerts {
        project: Uuid,
        #[arg(long)]
        code: Option<Uuid>,
        #[arg(long)]
        all: bool,
    },
    Dismiss {
        project: Uuid,
        alert: Uuid,
    },
    Scores {
        project: Uuid,
        #[arg(long)]
        code: Option<Uuid>,
    },
    Reflections {
        project: Uuid,
        code: Uuid,
    },
    /// Start facet discovery; watch the event stream for the result.
    Facets {
        project: Uuid,
        code: Uuid,
        #[arg(long)]
        seed: Option<u64>,
    },
    Icr {
        project: Uuid,
    },
    /// Ask for advice on disagreement number `index` of `codeaudit icr`.
    Suggest {
        project: Uuid,
        index: usize,
    },
    /// Record a decision on disagreement number `index`.
    Resolve {
        project: Uuid,
        index: usize,
        action: String,
        #[arg(long)]
        note: Option<String>,
    },
    Dashboard {
        project: Uuid,
    },
    History {
        project: Uuid,
        #[arg(long, default_value_t = 0)]
        after: u64,
    },
    Export {
        project: Uuid,
        out: PathBuf,
    },
    Import {
        archive: PathBuf,
    },
    /// Print push events as JSON lines until interrupted.
    Watch {
        project: Uuid,
        #[arg(long)]
        last_event_id: Option<u64>,
    },
}

fn print(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_json(s: &str) -> Result<serde_json::Value> {
    serde_json::from_str(s).context("argument is not valid JSON")
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut client = Client::new(cli.url);
    if let Some(t) = cli.token {
        client = client.with_token(t);
    }
    match cli.command {
        Command::Register { username, password } => {
            print(&client.register(&username, &password).await?)?
        }
        Command::Login { username, password } => {
            let session = client.login(&username, &password).await?;
            println!("{}", session.token);
            eprintln!(
                "expires {}; export CODEAUDIT_TOKEN to use it",
                session.expires_at
            );
        }
        Command::Me => print(&client.me().await?)?,
        Command::Projects => print(&client.projects().await?)?,
        Command::CreateProject { name, settings } => {
            let settings = settings.as_deref().map(parse_json).transpose()?;
            print(&client.create_project(&name, settings).await?)?
        }
        Command::AddMember { project, username } => {
            print(&client.add_member(project, &username).await?)?
        }
        Command::Settings { project, set } => match set {
            Some(patch) => print(
                &client
                    .update_settings(project, &parse_json(&patch)?)
                    .await?,
            )?,
            None => print(&client.settings(project).await?)?,
        },
        Command::Upload {
            project,
            file,
            title,
        } => {
            let body = std::fs::read_to_string(&file)
                .with_context(|| format!("reading {}", file.display()))?;
            let title = title.unwrap_or_else(|| {
                file.file_name()
                    .map_or_else(|| "document".into(), |n| n.to_string_lossy().into_owned())
            });
            print(&client.upload_document(project, &title, &body).await?)?
        }
        Command::Documents { project } => print(&client.documents(project).await?)?,
        Command::Codes { project } => print(&client.codes(project).await?)?,
        Command::CreateCode {
            project,
            name,
            definition,
            color,
        } => print(
            &client
                .create_code(
                    project,
                    &CreateCode {
                        name,
                        color,
                        definition,
                    },
                )
                .await?,
        )?,
        Command::Apply {
            project,
            document,
            start,
            end,
            codes,
        } => {
            let apply = ApplyCode {
                document_id: document,
                char_start: start,
                char_end: end,
                code_ids: codes,
            };
            print(&client.apply_code(project, &apply).await?)?
        }
        Command::Segments { project } => print(&client.segments(project).await?)?,
        Command::Alerts { project, code, all } => {
            let filter = AlertFilter {
                code_id: code,
                include_dismissed: all,
            };
            print(&client.alerts(project, &filter).await?)?
        }
        Command::Dismiss { project, alert } => print(&client.dismiss_alert(project, alert).await?)?,
        Command::Scores { project, code } => print(&client.scores(project, code).await?)?,
        Command::Reflections { project, code } => print(&client.reflections(project, code).await?)?,
        Command::Facets {
            project,
            code,
            seed,
        } => print(&client.request_facets(project, code, seed).await?)?,
        Command::Icr { project } => print(&client.icr(project).await?)?,
        Command::Suggest { project, index } => {
            let report = client.icr(project).await?;
            let d = report
                .disagreements
                .get(index)
                .context("no disagreement with that index")?;
            print(&client.suggest_resolution(project, d).await?)?
        }
        Command::Resolve {
            project,
            index,
            action,
            note,
        } => {
            let report = client.icr(project).await?;
            let d = report
                .disagreements
                .get(index)
                .context("no disagreement with that index")?;
            let action = serde_json::from_value(serde_json::Value::String(action))
                .context("action must be one of adopt_a, adopt_b, merge, new_code, discuss")?;
            let body = ResolveDisagreement {
                disagreement: d.clone(),
                action,
                note,
            };
            print(&client.resolve(project, &body).await?)?
        }
        Command::Dashboard { project } => print(&client.dashboard(project).await?)?,
        Command::History { project, after } => print(&client.history(project, after).await?)?,
        Command::Export { project, out } => {
            let bytes = client.export(project).await?;
            std::fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} bytes to {}", bytes.len(), out.display());
        }
        Command::Import { archive } => {
            let bytes = std::fs::read(&archive)
                .with_context(|| format!("reading {}", archive.display()))?;
            print(&client.import(bytes).await?)?
        }
        Command::Watch {
            project,
            last_event_id,
        } => {
            let mut stream = client.subscribe(project, last_event_id).await?;
            while let Some(event) = stream.next().await {
                println!("{}", serde_json::to_string(&event?)?);
            }
        }
    }
    Ok(())
}
